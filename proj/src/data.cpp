#include "mmtvae/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <utility>

#include <json.hpp>

#include "mmtvae/checkpoint.hpp"

namespace mmtvae {

namespace fs = std::filesystem;
using nlohmann::json;

const char* label_name(Label label) {
  switch (label) {
    case Label::AOM: return "AOM";
    case Label::OME: return "OME";
    case Label::NOE: return "NOE";
  }
  throw std::logic_error("invalid label value");
}

Label parse_label(const std::string& name) {
  if (name == "AOM") return Label::AOM;
  if (name == "OME") return Label::OME;
  if (name == "NOE") return Label::NOE;
  throw std::runtime_error("unknown class label '" + name + "'");
}

// --- Synthetic generator ---------------------------------------------------

SynthFactors draw_factors(Label label, Rng& rng) {
  SynthFactors f;
  f.label = label;
  switch (label) {
    case Label::AOM:
      f.absorbance_level = rng.uniform(0.05, 0.25);
      f.bulge = rng.uniform(0.6, 1.0);
      f.effusion_level = rng.uniform(0.2, 0.6);
      f.pressure_peak_center = rng.uniform(-200.0, 0.0);
      f.peak_sharpness = rng.uniform(0.5, 1.0);
      f.membrane_hue = rng.uniform(0.0, 18.0);  // red
      break;
    case Label::OME:
      f.absorbance_level = rng.uniform(0.05, 0.30);
      f.bulge = rng.uniform(0.0, 0.3);
      f.effusion_level = rng.uniform(0.5, 1.0);
      f.pressure_peak_center = rng.uniform(-200.0, 0.0);
      f.peak_sharpness = rng.uniform(0.5, 1.0);
      f.membrane_hue = rng.uniform(45.0, 62.0);  // yellow
      break;
    case Label::NOE:
      f.absorbance_level = rng.uniform(0.45, 0.85);
      f.bulge = rng.uniform(0.0, 0.2);
      f.effusion_level = rng.uniform(0.0, 0.1);
      f.pressure_peak_center = rng.uniform(-40.0, 40.0);
      f.peak_sharpness = rng.uniform(0.5, 1.0);
      f.membrane_hue = rng.uniform(25.0, 50.0);  // pale, low saturation
      break;
  }
  f.rng_seed = rng.next_u64();
  return f;
}

namespace {

// Native measurement axes: the downward pressure sweep and the stimulus band.
constexpr double kRawPressureHi = 200.0;
constexpr double kRawPressureLo = -300.0;
constexpr int kRawPressureSteps = 51;
constexpr double kRawFreqLo = 226.0;
constexpr double kRawFreqHi = 8000.0;
constexpr int kRawFreqSteps = 40;

// Position of a frequency within the stimulus band on a log scale, in [0,1].
double freq_pos(double hz) {
  return std::log(hz / kRawFreqLo) / std::log(kRawFreqHi / kRawFreqLo);
}

// Class-conditioned absorbance surface. AOM: low, pressure-flat, with a
// bulge-deepened notch around the mid frequencies. OME: low at low
// frequencies with an effusion-driven rise toward the top of the band. NOE:
// high overall, peaking in pressure at the peak center and rising with
// frequency.
double absorbance_at(const SynthFactors& f, double pressure, double hz) {
  const double rf = freq_pos(hz);
  switch (f.label) {
    case Label::AOM: {
      const double notch = 1.0 - 0.40 * f.bulge * std::exp(-std::pow((rf - 0.55) / 0.25, 2.0));
      return f.absorbance_level * (0.85 + 0.15 * rf) * (1.05 - 0.25 * f.bulge) * notch;
    }
    case Label::OME:
      return f.absorbance_level * (0.85 + 0.15 * rf) + 0.65 * f.effusion_level * rf * rf;
    case Label::NOE: {
      const double sigma = 110.0 - 60.0 * f.peak_sharpness;
      const double dp = (pressure - f.pressure_peak_center) / sigma;
      const double ridge = std::exp(-0.5 * dp * dp);
      return f.absorbance_level * (0.35 + 0.65 * ridge) * (0.55 + 0.45 * rf);
    }
  }
  throw std::logic_error("invalid label value");
}

double clamp01(double x) { return std::min(1.0, std::max(0.0, x)); }

// Per-cell measurement noise. The class signal must live in the means, not
// in the raw point-to-point geometry: with clean renders, any random
// projection of the inputs already separates the classes, and an embedding
// would get its clusters for free instead of having to learn them. Noise at
// this scale drowns the pairwise distances (it grows with the cell count)
// while leaving class means, and anything mean-based, essentially untouched.
constexpr double kWbtNoiseSigma = 0.25;
constexpr double kImageNoiseSigma = 0.25;

}  // namespace

WbtRawGrid render_wbt_raw(const SynthFactors& f) {
  WbtRawGrid g;
  g.pressures.resize(kRawPressureSteps);
  for (int i = 0; i < kRawPressureSteps; ++i) {
    g.pressures[i] = kRawPressureHi +
                     (kRawPressureLo - kRawPressureHi) * i / double(kRawPressureSteps - 1);
  }
  g.frequencies.resize(kRawFreqSteps);
  for (int j = 0; j < kRawFreqSteps; ++j) {
    g.frequencies[j] = kRawFreqLo * std::pow(kRawFreqHi / kRawFreqLo, j / double(kRawFreqSteps - 1));
  }

  // A low-amplitude smooth ripple (so samples within a class are not clones
  // of the class surface) plus independent per-cell speckle.
  Rng wr = Rng(f.rng_seed).fork(2);
  const double a1 = wr.uniform(0.5, 1.5), b1 = wr.uniform(0.5, 1.5), p1 = wr.uniform();
  const double a2 = wr.uniform(1.0, 2.0), b2 = wr.uniform(1.0, 2.0), p2 = wr.uniform();
  constexpr double kTau = 6.283185307179586;

  g.absorbance.resize(std::size_t(kRawPressureSteps) * kRawFreqSteps);
  for (int i = 0; i < kRawPressureSteps; ++i) {
    const double u = (kRawPressureHi - g.pressures[i]) / (kRawPressureHi - kRawPressureLo);
    for (int j = 0; j < kRawFreqSteps; ++j) {
      const double v = freq_pos(g.frequencies[j]);
      double a = absorbance_at(f, g.pressures[i], g.frequencies[j]);
      a += 0.012 * std::sin(kTau * (a1 * u + b1 * v + p1));
      a += 0.008 * std::sin(kTau * (a2 * u - b2 * v + p2));
      a += kWbtNoiseSigma * wr.normal();
      g.absorbance[std::size_t(i) * kRawFreqSteps + j] = clamp01(a);
    }
  }
  return g;
}

namespace {

struct Rgb {
  double r, g, b;
};

Rgb hsv_to_rgb(double hue_deg, double sat, double val) {
  const double h = std::fmod(std::fmod(hue_deg, 360.0) + 360.0, 360.0) / 60.0;
  const int sector = int(h) % 6;
  const double frac = h - std::floor(h);
  const double p = val * (1.0 - sat);
  const double q = val * (1.0 - sat * frac);
  const double t = val * (1.0 - sat * (1.0 - frac));
  switch (sector) {
    case 0: return {val, t, p};
    case 1: return {q, val, p};
    case 2: return {p, val, t};
    case 3: return {p, q, val};
    case 4: return {t, p, val};
    default: return {val, p, q};
  }
}

double smoothstep(double x) {
  x = clamp01(x);
  return x * x * (3.0 - 2.0 * x);
}

}  // namespace

Tensor render_image(const SynthFactors& f, std::int64_t size) {
  if (size < 4) throw std::invalid_argument("image size must be at least 4");
  Rng jr = Rng(f.rng_seed).fork(1);
  const double cx = 0.5 + 0.04 * (2.0 * jr.uniform() - 1.0);
  const double cy = 0.5 + 0.04 * (2.0 * jr.uniform() - 1.0);
  const double radius = 0.36 + 0.08 * jr.uniform();

  double sat = 0.0, val = 0.0;
  switch (f.label) {
    case Label::AOM:
      sat = 0.55 + 0.25 * f.bulge;
      val = 0.62;
      break;
    case Label::OME:
      sat = 0.45 + 0.25 * f.effusion_level;
      val = 0.70;
      break;
    case Label::NOE:
      sat = 0.10 + 0.06 * jr.uniform();
      val = 0.74;
      break;
  }
  val += 0.04 * (2.0 * jr.uniform() - 1.0);
  const Rgb membrane = hsv_to_rgb(f.membrane_hue, sat, val);

  // Malleus handle: a bright stripe from the disk center toward upper left.
  const double stripe_angle = (250.0 + 16.0 * (jr.uniform() - 0.5)) * 3.141592653589793 / 180.0;
  const double stripe_len = 0.62 * radius;
  const double stripe_width = (0.05 + 0.015 * jr.uniform()) * radius;
  const double sx = std::cos(stripe_angle), sy = std::sin(stripe_angle);

  // Horizontal fluid line; more effusion pushes it higher up the membrane.
  const double fluid_y = cy + radius * (1.0 - 1.1 * f.effusion_level);
  const Rgb amber{0.78, 0.62, 0.25};
  const Rgb stripe_col{0.93, 0.91, 0.87};

  std::vector<double> px(std::size_t(3) * size * size);
  const double edge = 1.5 / double(size);
  for (std::int64_t y = 0; y < size; ++y) {
    for (std::int64_t x = 0; x < size; ++x) {
      const double u = (x + 0.5) / double(size);
      const double v = (y + 0.5) / double(size);
      const double du = u - cx, dv = v - cy;
      const double r = std::sqrt(du * du + dv * dv);
      const double rn = r / radius;

      Rgb out{0.055 * (1.0 - 0.35 * r), 0.048 * (1.0 - 0.35 * r), 0.052 * (1.0 - 0.35 * r)};
      const double disk = smoothstep((radius - r) / edge);
      if (disk > 0.0) {
        Rgb col = membrane;
        // Effusion tint below the fluid line.
        const double below = smoothstep((v - fluid_y) / (0.12 * radius));
        const double tint = 0.55 * f.effusion_level * below;
        col.r += (amber.r - col.r) * tint;
        col.g += (amber.g - col.g) * tint;
        col.b += (amber.b - col.b) * tint;
        // Bulge shading: a protruding membrane catches light at the center
        // and falls off toward the annulus.
        const double shade =
            0.85 + 0.40 * f.bulge * (1.0 - rn * rn) - 0.30 * rn * rn * rn * rn;
        col.r *= shade;
        col.g *= shade;
        col.b *= shade;
        // Stripe: distance to the malleus segment.
        const double along = std::max(0.0, std::min(stripe_len, du * sx + dv * sy));
        const double qx = du - along * sx, qy = dv - along * sy;
        const double d = std::sqrt(qx * qx + qy * qy);
        const double glow = 0.8 * std::exp(-(d * d) / (stripe_width * stripe_width));
        col.r += (stripe_col.r - col.r) * glow;
        col.g += (stripe_col.g - col.g) * glow;
        col.b += (stripe_col.b - col.b) * glow;

        out.r += (col.r - out.r) * disk;
        out.g += (col.g - out.g) * disk;
        out.b += (col.b - out.b) * disk;
      }
      const std::size_t at = std::size_t(y) * size + x;
      px[at] = clamp01(out.r);
      px[std::size_t(size) * size + at] = clamp01(out.g);
      px[2 * std::size_t(size) * size + at] = clamp01(out.b);
    }
  }
  return Tensor::from_data({3, size, size}, std::move(px));
}

Dataset synth_dataset(std::int64_t n_per_class, std::int64_t image_size, std::uint64_t seed) {
  return synth_dataset(std::array<std::int64_t, 3>{n_per_class, n_per_class, n_per_class},
                       image_size, seed);
}

Dataset synth_dataset(const std::array<std::int64_t, 3>& per_class, std::int64_t image_size,
                      std::uint64_t seed) {
  for (std::int64_t n : per_class) {
    if (n < 1) throw std::invalid_argument("per-class sample count must be at least 1");
  }
  Dataset ds;
  ds.image_size = image_size;
  Rng rng(seed);
  int patient_no = 0;
  int sample_no = 0;
  char idbuf[16];
  for (int c = 0; c < kNumClasses; ++c) {
    const Label label = Label(c);
    std::int64_t made = 0;
    while (made < per_class[std::size_t(c)]) {
      // Small multi-sample patients (both ears, repeat visits) so the
      // patient-wise split has real granularity to respect.
      std::int64_t in_patient =
          std::min<std::int64_t>(1 + std::int64_t(rng.uniform_int(3)), per_class[std::size_t(c)] - made);
      std::snprintf(idbuf, sizeof idbuf, "P%04d", patient_no++);
      const std::string patient_id = idbuf;
      for (std::int64_t k = 0; k < in_patient; ++k, ++made) {
        SynthFactors f = draw_factors(label, rng);
        PairedSample s;
        s.label = label;
        s.patient_id = patient_id;
        std::snprintf(idbuf, sizeof idbuf, "S%05d", sample_no++);
        s.sample_id = idbuf;
        s.image = render_image(f, image_size);
        s.wbt = resample_wbt(render_wbt_raw(f), image_size);
        ds.samples.push_back(std::move(s));
        ds.factors.push_back(f);
      }
    }
  }
  return ds;
}

// --- Regridding ------------------------------------------------------------

namespace {

// Bracketing index and interpolation weight along one axis. `ascending`
// selects the comparison direction; x must lie within the axis range.
std::pair<std::size_t, double> bracket(const std::vector<double>& axis, double x, bool ascending) {
  std::size_t lo = 0, hi = axis.size() - 1;
  while (hi - lo > 1) {
    const std::size_t mid = (lo + hi) / 2;
    const bool left = ascending ? (x < axis[mid]) : (x > axis[mid]);
    if (left) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  return {lo, (x - axis[lo]) / (axis[lo + 1] - axis[lo])};
}

void validate_raw_grid(const WbtRawGrid& raw) {
  if (raw.pressures.size() < 2) throw std::runtime_error("pressure axis needs at least 2 points");
  if (raw.frequencies.size() < 2) {
    throw std::runtime_error("frequency axis needs at least 2 points");
  }
  for (std::size_t i = 1; i < raw.pressures.size(); ++i) {
    if (raw.pressures[i] >= raw.pressures[i - 1]) {
      throw std::runtime_error("pressure axis must be strictly decreasing");
    }
  }
  for (std::size_t j = 1; j < raw.frequencies.size(); ++j) {
    if (raw.frequencies[j] <= raw.frequencies[j - 1]) {
      throw std::runtime_error("frequency axis must be strictly increasing");
    }
  }
  if (raw.absorbance.size() != raw.pressures.size() * raw.frequencies.size()) {
    throw std::runtime_error("absorbance matrix extents do not match the axes");
  }
}

}  // namespace

Tensor resample_wbt(const WbtRawGrid& raw, std::int64_t steps) {
  if (steps < 2) throw std::invalid_argument("resampling needs at least 2 steps per axis");
  validate_raw_grid(raw);
  constexpr double kPressureHi = 180.0, kPressureLo = -280.0;
  constexpr double kFreqLo = 226.0, kFreqHi = 4000.0;
  if (raw.pressures.front() < kPressureHi || raw.pressures.back() > kPressureLo) {
    throw std::runtime_error("pressure axis does not cover the 180..-280 daPa target range");
  }
  if (raw.frequencies.front() > kFreqLo || raw.frequencies.back() < kFreqHi) {
    throw std::runtime_error("frequency axis does not cover the 226..4000 Hz target range");
  }

  const std::size_t nf = raw.frequencies.size();
  std::vector<double> out(std::size_t(steps) * steps);
  for (std::int64_t i = 0; i < steps; ++i) {
    const double p = kPressureHi + (kPressureLo - kPressureHi) * i / double(steps - 1);
    const auto [pi, pt] = bracket(raw.pressures, p, /*ascending=*/false);
    for (std::int64_t j = 0; j < steps; ++j) {
      const double f = kFreqLo + (kFreqHi - kFreqLo) * j / double(steps - 1);
      const auto [fi, ft] = bracket(raw.frequencies, f, /*ascending=*/true);
      const double a00 = raw.absorbance[pi * nf + fi];
      const double a01 = raw.absorbance[pi * nf + fi + 1];
      const double a10 = raw.absorbance[(pi + 1) * nf + fi];
      const double a11 = raw.absorbance[(pi + 1) * nf + fi + 1];
      const double top = a00 + (a01 - a00) * ft;
      const double bot = a10 + (a11 - a10) * ft;
      out[std::size_t(i) * steps + j] = clamp01(top + (bot - top) * pt);
    }
  }
  return Tensor::from_data({1, steps, steps}, std::move(out));
}

// --- Augmentation ----------------------------------------------------------

namespace {

// Random erasing: rectangle with area and aspect drawn from the configured
// ranges, filled with uniform noise. Draws are retried until the rounded
// rectangle fits and its realized area fraction stays inside the range.
void maybe_erase(std::vector<double>& v, std::int64_t channels, std::int64_t h, std::int64_t w,
                 const AugmentConfig& cfg, Rng& rng) {
  if (rng.uniform() >= cfg.erase_prob) return;
  for (int attempt = 0; attempt < 100; ++attempt) {
    const double frac = rng.uniform(cfg.erase_area_lo, cfg.erase_area_hi);
    const double aspect = rng.uniform(cfg.erase_aspect_lo, cfg.erase_aspect_hi);
    const double area = frac * double(h) * double(w);
    const std::int64_t eh = std::llround(std::sqrt(area * aspect));
    const std::int64_t ew = std::llround(std::sqrt(area / aspect));
    if (eh < 1 || ew < 1 || eh > h || ew > w) continue;
    const double realized = double(eh * ew) / (double(h) * double(w));
    if (realized < cfg.erase_area_lo || realized > cfg.erase_area_hi) continue;
    const std::int64_t y0 = std::int64_t(rng.uniform_int(std::uint64_t(h - eh + 1)));
    const std::int64_t x0 = std::int64_t(rng.uniform_int(std::uint64_t(w - ew + 1)));
    for (std::int64_t c = 0; c < channels; ++c) {
      for (std::int64_t y = y0; y < y0 + eh; ++y) {
        for (std::int64_t x = x0; x < x0 + ew; ++x) {
          v[std::size_t((c * h + y) * w + x)] = rng.uniform();
        }
      }
    }
    return;
  }
}

}  // namespace

PairedSample augment(const PairedSample& s, const AugmentConfig& cfg, Rng& rng) {
  for (double p : {cfg.erase_prob, cfg.hflip_prob}) {
    if (p < 0.0 || p > 1.0) throw std::invalid_argument("augmentation probability outside [0,1]");
  }
  const Shape& ishape = s.image.shape();
  const Shape& wshape = s.wbt.shape();
  if (ishape.size() != 3 || wshape.size() != 3) {
    throw std::invalid_argument("augment expects (C,H,W) sample tensors");
  }
  const std::int64_t h = ishape[1], w = ishape[2];
  std::vector<double> img = s.image.values();
  std::vector<double> wbt = s.wbt.values();

  // Flip, then rotate, then erase.
  if (rng.uniform() < cfg.hflip_prob) {
    for (std::int64_t c = 0; c < ishape[0]; ++c) {
      for (std::int64_t y = 0; y < h; ++y) {
        double* row = img.data() + std::size_t((c * h + y) * w);
        std::reverse(row, row + w);
      }
    }
  }

  const double angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg) * 3.141592653589793 / 180.0;
  {
    const double cs = std::cos(angle), sn = std::sin(angle);
    const double ctr = (double(w) - 1.0) / 2.0;
    const double ctr_y = (double(h) - 1.0) / 2.0;
    std::vector<double> rot(img.size(), 0.0);
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        // Sample the source at the inverse-rotated position; zero outside.
        const double xs = cs * (x - ctr) - sn * (y - ctr_y) + ctr;
        const double ys = sn * (x - ctr) + cs * (y - ctr_y) + ctr_y;
        const double xf = std::floor(xs), yf = std::floor(ys);
        const double tx = xs - xf, ty = ys - yf;
        const std::int64_t x0 = std::int64_t(xf), y0 = std::int64_t(yf);
        for (std::int64_t c = 0; c < ishape[0]; ++c) {
          const double* plane = img.data() + std::size_t(c) * h * w;
          auto tap = [&](std::int64_t yy, std::int64_t xx) {
            return (yy >= 0 && yy < h && xx >= 0 && xx < w) ? plane[yy * w + xx] : 0.0;
          };
          rot[std::size_t((c * h + y) * w + x)] =
              (1.0 - ty) * ((1.0 - tx) * tap(y0, x0) + tx * tap(y0, x0 + 1)) +
              ty * ((1.0 - tx) * tap(y0 + 1, x0) + tx * tap(y0 + 1, x0 + 1));
        }
      }
    }
    img = std::move(rot);
  }

  maybe_erase(img, ishape[0], h, w, cfg, rng);
  maybe_erase(wbt, wshape[0], wshape[1], wshape[2], cfg, rng);

  PairedSample out;
  out.image = Tensor::from_data(ishape, std::move(img));
  out.wbt = Tensor::from_data(wshape, std::move(wbt));
  out.label = s.label;
  out.patient_id = s.patient_id;
  out.sample_id = s.sample_id;
  return out;
}

// --- Splitting and batching ------------------------------------------------

SplitManifest split_by_patient(const std::vector<PairedSample>& samples, double test_fraction,
                               std::uint64_t seed) {
  if (test_fraction < 0.0 || test_fraction >= 1.0) {
    throw std::invalid_argument("test fraction must be in [0,1)");
  }
  std::vector<std::string> patients;
  std::map<std::string, std::size_t> patient_count;
  for (const PairedSample& s : samples) {
    if (s.patient_id.empty()) throw std::runtime_error("sample without a patient id");
    if (patient_count.emplace(s.patient_id, 0).second) patients.push_back(s.patient_id);
    ++patient_count[s.patient_id];
  }
  if (patients.size() < 2) {
    throw std::runtime_error("patient-disjoint split needs at least two patients");
  }

  Rng rng(seed);
  rng.shuffle(patients);
  const double target = test_fraction * double(samples.size());
  std::set<std::string> test_patients;
  std::size_t covered = 0;
  for (const std::string& p : patients) {
    if (double(covered) >= target) break;
    test_patients.insert(p);
    covered += patient_count[p];
  }
  if (test_patients.size() == patients.size()) {
    throw std::runtime_error("test fraction leaves no training patients");
  }

  SplitManifest m;
  for (const PairedSample& s : samples) {
    if (test_patients.count(s.patient_id)) {
      m.test_ids.push_back(s.sample_id);
    } else {
      m.train_ids.push_back(s.sample_id);
    }
  }
  for (const std::string& p : patients) {
    m.patient_split[p] = test_patients.count(p) ? "test" : "train";
  }
  return m;
}

BalancedBatchIterator::BalancedBatchIterator(const std::vector<Label>& labels,
                                             std::int64_t per_class, std::uint64_t seed)
    : per_class_(per_class), rng_(seed) {
  if (per_class < 1) throw std::invalid_argument("per-class batch size must be at least 1");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    queues_[std::size_t(int(labels[i]))].push_back(i);
  }
  for (int c = 0; c < kNumClasses; ++c) {
    if (queues_[std::size_t(c)].empty()) {
      throw std::runtime_error(std::string("class ") + label_name(Label(c)) +
                               " has no samples to batch");
    }
    rng_.shuffle(queues_[std::size_t(c)]);
  }
}

std::vector<std::size_t> BalancedBatchIterator::next() {
  std::vector<std::size_t> batch;
  batch.reserve(std::size_t(batch_size()));
  for (int c = 0; c < kNumClasses; ++c) {
    auto& queue = queues_[std::size_t(c)];
    auto& pos = pos_[std::size_t(c)];
    for (std::int64_t k = 0; k < per_class_; ++k) {
      if (pos == queue.size()) {
        rng_.shuffle(queue);
        pos = 0;
      }
      batch.push_back(queue[pos++]);
    }
  }
  return batch;
}

// --- Batch assembly --------------------------------------------------------

namespace {

Tensor stack_channel(const std::vector<PairedSample>& samples, bool image) {
  if (samples.empty()) throw std::invalid_argument("cannot stack an empty sample list");
  const Shape& one = image ? samples[0].image.shape() : samples[0].wbt.shape();
  Shape shape{std::int64_t(samples.size()), one[0], one[1], one[2]};
  std::vector<double> out;
  out.reserve(std::size_t(shape_numel(shape)));
  for (const PairedSample& s : samples) {
    const Tensor& t = image ? s.image : s.wbt;
    if (t.shape() != one) {
      throw std::invalid_argument("stacked samples must share one tensor shape");
    }
    const std::vector<double>& v = t.values();
    out.insert(out.end(), v.begin(), v.end());
  }
  return Tensor::from_data(shape, std::move(out));
}

}  // namespace

Tensor stack_images(const std::vector<PairedSample>& samples) {
  return stack_channel(samples, true);
}

Tensor stack_wbts(const std::vector<PairedSample>& samples) {
  return stack_channel(samples, false);
}

// --- Persistence -----------------------------------------------------------

namespace {

json factors_to_json(const SynthFactors& f) {
  return json{{"class", label_name(f.label)},
              {"absorbance_level", f.absorbance_level},
              {"pressure_peak_center", f.pressure_peak_center},
              {"peak_sharpness", f.peak_sharpness},
              {"membrane_hue", f.membrane_hue},
              {"bulge", f.bulge},
              {"effusion_level", f.effusion_level},
              {"rng_seed", f.rng_seed}};
}

SynthFactors factors_from_json(const json& j) {
  SynthFactors f;
  f.label = parse_label(j.at("class").get<std::string>());
  f.absorbance_level = j.at("absorbance_level").get<double>();
  f.pressure_peak_center = j.at("pressure_peak_center").get<double>();
  f.peak_sharpness = j.at("peak_sharpness").get<double>();
  f.membrane_hue = j.at("membrane_hue").get<double>();
  f.bulge = j.at("bulge").get<double>();
  f.effusion_level = j.at("effusion_level").get<double>();
  f.rng_seed = j.at("rng_seed").get<std::uint64_t>();
  return f;
}

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os.write(bytes.data(), std::streamsize(bytes.size()));
    if (!os) throw std::runtime_error("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

TensorRecord to_record(const std::string& name, const Tensor& t) {
  TensorRecord r;
  r.name = name;
  r.shape = t.shape();
  r.data.reserve(t.values().size());
  for (double v : t.values()) r.data.push_back(float(v));
  return r;
}

}  // namespace

void save_dataset(const std::string& dir, const Dataset& ds) {
  if (ds.samples.size() != ds.factors.size()) {
    throw std::invalid_argument("dataset samples and factor records are misaligned");
  }
  fs::create_directories(fs::path(dir) / "samples");
  json manifest;
  manifest["image_size"] = ds.image_size;
  manifest["samples"] = json::array();
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const PairedSample& s = ds.samples[i];
    manifest["samples"].push_back(json{{"sample_id", s.sample_id},
                                       {"patient_id", s.patient_id},
                                       {"label", label_name(s.label)},
                                       {"factors", factors_to_json(ds.factors[i])}});
    std::ostringstream os(std::ios::binary);
    write_tensor_record(os, to_record("image", s.image));
    write_tensor_record(os, to_record("wbt", s.wbt));
    write_file_atomic(fs::path(dir) / "samples" / (s.sample_id + ".bin"), os.str());
  }
  write_file_atomic(fs::path(dir) / "manifest.json", manifest.dump(2) + "\n");
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream is(fs::path(dir) / "manifest.json");
  if (!is) throw std::runtime_error("cannot open " + dir + "/manifest.json");
  json manifest;
  try {
    is >> manifest;
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed dataset manifest: " + std::string(e.what()));
  }

  Dataset ds;
  ds.image_size = manifest.at("image_size").get<std::int64_t>();
  for (const json& entry : manifest.at("samples")) {
    PairedSample s;
    s.sample_id = entry.at("sample_id").get<std::string>();
    s.patient_id = entry.at("patient_id").get<std::string>();
    s.label = parse_label(entry.at("label").get<std::string>());

    const fs::path bin = fs::path(dir) / "samples" / (s.sample_id + ".bin");
    std::ifstream bs(bin, std::ios::binary);
    if (!bs) throw std::runtime_error("cannot open " + bin.string());
    TensorRecord r;
    bool have_image = false, have_wbt = false;
    while (read_tensor_record(bs, r)) {
      std::vector<double> vals(r.data.begin(), r.data.end());
      if (r.name == "image") {
        s.image = Tensor::from_data(r.shape, std::move(vals));
        have_image = true;
      } else if (r.name == "wbt") {
        s.wbt = Tensor::from_data(r.shape, std::move(vals));
        have_wbt = true;
      }
    }
    if (!have_image || !have_wbt) {
      throw std::runtime_error("sample file " + bin.string() + " is missing a modality record");
    }
    ds.samples.push_back(std::move(s));
    ds.factors.push_back(factors_from_json(entry.at("factors")));
  }
  return ds;
}

}  // namespace mmtvae
