#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mmtvae/rng.hpp"
#include "mmtvae/tensor.hpp"

namespace mmtvae {

// Diagnosis classes. The integer values double as class indices everywhere a
// per-class array or batch slot is involved, so the order is load-bearing.
enum class Label : int { AOM = 0, OME = 1, NOE = 2 };

inline constexpr int kNumClasses = 3;

const char* label_name(Label label);
Label parse_label(const std::string& name);

// Generative factors behind one synthetic sample. Both modalities are
// rendered from the same record, which is kept alongside the sample so
// downstream evaluation can score generated data against known ground truth.
struct SynthFactors {
  Label label = Label::AOM;
  double absorbance_level = 0.0;   // overall absorbance scale in [0,1]
  double pressure_peak_center = 0.0;  // daPa, only meaningful for NOE
  double peak_sharpness = 0.0;     // higher = narrower NOE pressure ridge
  double membrane_hue = 0.0;       // degrees on the HSV wheel
  double bulge = 0.0;              // membrane protrusion, drives shading
  double effusion_level = 0.0;     // fluid amount, drives tint + WBT rise
  std::uint64_t rng_seed = 0;      // per-sample stream for jitter/noise
};

// One image/WBT pair. Pixels and absorbances both live in [0,1]; the WBT
// channel is an absorbance surface laid out as pressure rows (descending,
// +180 daPa at row 0) by frequency columns (ascending, 226 Hz at column 0).
struct PairedSample {
  Tensor image;  // (3, S, S)
  Tensor wbt;    // (1, S, S)
  Label label = Label::AOM;
  std::string patient_id;
  std::string sample_id;
};

// A measurement on its native axes, before regridding. Pressures descend
// (the downward tympanometric sweep), frequencies ascend.
struct WbtRawGrid {
  std::vector<double> pressures;    // daPa, strictly decreasing
  std::vector<double> frequencies;  // Hz, strictly increasing
  std::vector<double> absorbance;   // |pressures| x |frequencies|, in [0,1]
};

struct Dataset {
  std::int64_t image_size = 0;
  std::vector<PairedSample> samples;
  std::vector<SynthFactors> factors;  // parallel to samples
};

struct AugmentConfig {
  double erase_prob = 0.5;
  double erase_area_lo = 0.02;
  double erase_area_hi = 0.33;
  double erase_aspect_lo = 0.3;
  double erase_aspect_hi = 3.3;
  double hflip_prob = 0.5;     // image only
  double rotation_deg = 20.0;  // image only, angle drawn from +/- this
};

struct SplitManifest {
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
  std::map<std::string, std::string> patient_split;  // patient -> train|test
};

// --- Synthetic generator ---------------------------------------------------

// Draws class-conditioned factors: AOM low absorbance with a bulging red
// membrane, OME low absorbance with effusion and a yellow membrane, NOE high
// absorbance peaking near 0 daPa behind a pale membrane.
SynthFactors draw_factors(Label label, Rng& rng);

// Renders the absorbance surface on the native measurement axes
// (200..-300 daPa, 226..8000 Hz). Deterministic in the factor record.
WbtRawGrid render_wbt_raw(const SynthFactors& f);

// Renders the otoscopy image at the requested size: dark background, hued
// membrane disk with bulge shading and an effusion tint, bright malleus
// stripe. Deterministic in the factor record.
Tensor render_image(const SynthFactors& f, std::int64_t size);

// Generates n_per_class samples per class at the given square size. The WBT
// channel is the raw surface regridded onto size-step standard axes. Samples
// are grouped into small multi-sample patients. Bit-identical per seed.
Dataset synth_dataset(std::int64_t n_per_class, std::int64_t image_size, std::uint64_t seed);

// Same, with explicit per-class counts (index = Label value) for imbalanced
// datasets; the bundled default ratio is 537:419:211.
Dataset synth_dataset(const std::array<std::int64_t, 3>& per_class, std::int64_t image_size,
                      std::uint64_t seed);

// --- Regridding ------------------------------------------------------------

// Bilinearly resamples a raw grid onto the standard axes: `steps` equally
// spaced pressures from +180 down to -280 daPa and `steps` equally spaced
// frequencies from 226 to 4000 Hz. Output is (1, steps, steps), clamped to
// [0,1]. Throws if the raw axes do not cover the target range, naming the
// offending axis.
Tensor resample_wbt(const WbtRawGrid& raw, std::int64_t steps = 64);

// --- Augmentation ----------------------------------------------------------

// Horizontal flip and bilinear +/-rotation_deg rotation (zero-filled corners)
// on the image only, then random erasing with uniform-noise fill drawn
// independently for image and WBT. Label and ids pass through untouched.
PairedSample augment(const PairedSample& s, const AugmentConfig& cfg, Rng& rng);

// --- Splitting and batching ------------------------------------------------

// Shuffles patients by seed and greedily assigns them to the test split until
// it covers at least test_fraction of the samples, so no patient ever
// straddles the boundary. Throws if there are fewer than two patients.
SplitManifest split_by_patient(const std::vector<PairedSample>& samples, double test_fraction,
                               std::uint64_t seed);

// Emits batches with exactly per_class samples from each class, class-major
// (all AOM, then OME, then NOE). Each class is consumed as a shuffled
// permutation queue and reshuffled when exhausted, so minority classes are
// oversampled while every sample of a class appears before any repeats.
// Single consumer; owns its RNG.
class BalancedBatchIterator {
 public:
  BalancedBatchIterator(const std::vector<Label>& labels, std::int64_t per_class,
                        std::uint64_t seed);

  std::vector<std::size_t> next();

  std::int64_t batch_size() const { return per_class_ * kNumClasses; }

 private:
  std::int64_t per_class_;
  Rng rng_;
  std::array<std::vector<std::size_t>, kNumClasses> queues_;
  std::array<std::size_t, kNumClasses> pos_{};
};

// --- Batch assembly --------------------------------------------------------

// Stacks the given samples' tensors into (N,3,S,S) / (N,1,S,S) leaves.
Tensor stack_images(const std::vector<PairedSample>& samples);
Tensor stack_wbts(const std::vector<PairedSample>& samples);

// --- Persistence -----------------------------------------------------------

// Directory layout: manifest.json (ids, labels, patients, factor records,
// image size) plus samples/<sample_id>.bin holding the "image" and "wbt"
// tensor records. Tensors are little-endian f32, so load(save(d)) followed by
// another save round-trips byte-identically.
void save_dataset(const std::string& dir, const Dataset& ds);
Dataset load_dataset(const std::string& dir);

}  // namespace mmtvae
