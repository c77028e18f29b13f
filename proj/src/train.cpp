#include "mmtvae/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mmtvae/checkpoint.hpp"
#include "mmtvae/kde.hpp"
#include "mmtvae/metrics.hpp"

namespace mmtvae {

TrainConfig TrainConfig::paper() {
  TrainConfig c;
  c.model = ModelConfig::paper();
  c.epochs = 5000;
  return c;
}

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.model = ModelConfig::desk();
  c.epochs = 200;
  return c;
}

void TrainConfig::validate() const {
  model.validate();
  if (epochs < 1) throw std::invalid_argument("training needs at least one epoch");
  if (per_class_batch < 1) throw std::invalid_argument("per-class batch size must be positive");
  if (learning_rate < 0.0) throw std::invalid_argument("learning rate must be non-negative");
  if (checkpoint_every < 1) throw std::invalid_argument("checkpoint cadence must be positive");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0))
    throw std::invalid_argument("test fraction must lie in [0, 1)");
}

void to_json(nlohmann::json& j, const AugmentConfig& c) {
  j = nlohmann::json{{"erase_prob", c.erase_prob},       {"erase_area_lo", c.erase_area_lo},
                     {"erase_area_hi", c.erase_area_hi}, {"erase_aspect_lo", c.erase_aspect_lo},
                     {"erase_aspect_hi", c.erase_aspect_hi}, {"hflip_prob", c.hflip_prob},
                     {"rotation_deg", c.rotation_deg}};
}

void from_json(const nlohmann::json& j, AugmentConfig& c) {
  c.erase_prob = j.value("erase_prob", c.erase_prob);
  c.erase_area_lo = j.value("erase_area_lo", c.erase_area_lo);
  c.erase_area_hi = j.value("erase_area_hi", c.erase_area_hi);
  c.erase_aspect_lo = j.value("erase_aspect_lo", c.erase_aspect_lo);
  c.erase_aspect_hi = j.value("erase_aspect_hi", c.erase_aspect_hi);
  c.hflip_prob = j.value("hflip_prob", c.hflip_prob);
  c.rotation_deg = j.value("rotation_deg", c.rotation_deg);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  nlohmann::json model;
  to_json(model, c.model);
  nlohmann::json augment;
  to_json(augment, c.augment);
  j = nlohmann::json{{"model", model},
                     {"epochs", c.epochs},
                     {"per_class_batch", c.per_class_batch},
                     {"seed", c.seed},
                     {"learning_rate", c.learning_rate},
                     {"latent_weight", c.loss.latent_weight},
                     {"triplet_margin", c.triplet.margin},
                     {"augment", augment},
                     {"augment_enabled", c.augment_enabled},
                     {"test_fraction", c.test_fraction},
                     {"checkpoint_every", c.checkpoint_every}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (j.contains("model")) {
    // Overlay onto the current model config so partial overrides work.
    nlohmann::json base;
    to_json(base, c.model);
    base.update(j.at("model"));
    from_json(base, c.model);
  }
  c.epochs = j.value("epochs", c.epochs);
  c.per_class_batch = j.value("per_class_batch", c.per_class_batch);
  c.seed = j.value("seed", c.seed);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.loss.latent_weight = j.value("latent_weight", c.loss.latent_weight);
  c.triplet.margin = j.value("triplet_margin", c.triplet.margin);
  if (j.contains("augment")) from_json(j.at("augment"), c.augment);
  c.augment_enabled = j.value("augment_enabled", c.augment_enabled);
  c.test_fraction = j.value("test_fraction", c.test_fraction);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
}

namespace {

std::string csv_row(std::int64_t epoch, const LossReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%.17g,%.17g,%.17g",
                static_cast<long long>(epoch), r.ssim_loss, r.bce_loss, r.kl_loss, r.triplet_loss,
                r.total);
  return std::string(buf);
}

std::vector<TensorRecord> adam_records(const std::vector<ParamRef>& params,
                                       const AdamState& state) {
  std::vector<TensorRecord> out;
  out.reserve(2 * params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    TensorRecord m{"adam.m." + params[i].name, params[i].tensor.shape(), {}};
    TensorRecord v{"adam.v." + params[i].name, params[i].tensor.shape(), {}};
    m.data.reserve(state.m[i].size());
    v.data.reserve(state.v[i].size());
    for (double x : state.m[i]) m.data.push_back(float(x));
    for (double x : state.v[i]) v.data.push_back(float(x));
    out.push_back(std::move(m));
    out.push_back(std::move(v));
  }
  return out;
}

nlohmann::json metrics_json(const LossReport& r) {
  return nlohmann::json{{"ssim", r.ssim_loss},
                        {"bce", r.bce_loss},
                        {"kl", r.kl_loss},
                        {"triplet", r.triplet_loss},
                        {"total", r.total}};
}

}  // namespace

std::vector<PairedSample> select_split(const Dataset& ds, const SplitManifest& man,
                                       const std::string& split) {
  const std::vector<std::string>* ids = nullptr;
  if (split == "train") {
    ids = &man.train_ids;
  } else if (split == "test") {
    ids = &man.test_ids;
  } else {
    throw std::invalid_argument("unknown split '" + split + "'; expected train or test");
  }
  std::unordered_map<std::string, const PairedSample*> by_id;
  for (const PairedSample& s : ds.samples) by_id[s.sample_id] = &s;
  std::vector<PairedSample> out;
  out.reserve(ids->size());
  for (const std::string& id : *ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw std::runtime_error("split references missing sample " + id);
    out.push_back(*it->second);
  }
  return out;
}

Tensor embed_samples(MultiModalVae& model, const std::vector<PairedSample>& samples,
                     std::int64_t batch) {
  if (samples.empty()) throw std::invalid_argument("no samples to embed");
  const std::int64_t latent = model.config().latent_dim;
  std::vector<double> rows;
  rows.reserve(samples.size() * std::size_t(latent));
  for (std::size_t begin = 0; begin < samples.size(); begin += std::size_t(batch)) {
    const std::size_t end = std::min(samples.size(), begin + std::size_t(batch));
    const std::vector<PairedSample> chunk(samples.begin() + std::ptrdiff_t(begin),
                                          samples.begin() + std::ptrdiff_t(end));
    const auto [mu, logvar] = model.encode(stack_images(chunk), stack_wbts(chunk));
    rows.insert(rows.end(), mu.values().begin(), mu.values().end());
  }
  return Tensor::from_data({std::int64_t(samples.size()), latent}, std::move(rows));
}

TrainResult train(const std::string& data_dir, const std::string& out_dir,
                  const TrainConfig& cfg) {
  cfg.validate();
  Dataset ds = load_dataset(data_dir);
  if (ds.image_size != cfg.model.image_size) {
    throw std::invalid_argument("dataset is " + std::to_string(ds.image_size) +
                                "px but the model expects " +
                                std::to_string(cfg.model.image_size) + "px");
  }
  const SplitManifest man = split_by_patient(ds.samples, cfg.test_fraction, cfg.seed);
  const std::vector<PairedSample> train_set = select_split(ds, man, "train");
  std::vector<Label> train_labels;
  train_labels.reserve(train_set.size());
  for (const PairedSample& s : train_set) train_labels.push_back(s.label);

  std::filesystem::create_directories(out_dir);
  TrainResult result;
  result.latest_checkpoint = out_dir + "/checkpoint_latest.bin";
  result.best_checkpoint = out_dir + "/checkpoint_best.bin";
  result.final_checkpoint = out_dir + "/checkpoint_final.bin";
  result.metrics_csv = out_dir + "/metrics.csv";

  MultiModalVae model(cfg.model, cfg.seed);
  model.set_mode(BatchNorm2d::Mode::train);
  AdamState adam;
  adam.lr = cfg.learning_rate;
  adam.init(model.params());

  Rng root(cfg.seed);
  Rng aug_rng = root.fork(1);
  Rng eps_rng = root.fork(2);
  BalancedBatchIterator batches(train_labels, cfg.per_class_batch, root.fork(3).next_u64());
  const std::int64_t steps_per_epoch =
      (std::int64_t(train_set.size()) + batches.batch_size() - 1) / batches.batch_size();

  nlohmann::json cfg_json;
  to_json(cfg_json, cfg);
  const auto save = [&](const std::string& path, std::int64_t epoch, const LossReport& r) {
    nlohmann::json extra{{"train_config", cfg_json},
                         {"adam_step_count", adam.step_count},
                         {"metrics", metrics_json(r)}};
    save_checkpoint(path, model, epoch, cfg.seed, extra, adam_records(model.params(), adam));
  };

  std::ofstream log(result.metrics_csv, std::ios::trunc);
  if (!log) throw std::runtime_error("cannot open '" + result.metrics_csv + "' for writing");
  log << "epoch,ssim,bce,kl,triplet,total\n";

  double best_total = std::numeric_limits<double>::infinity();
  LossReport epoch_mean;
  for (std::int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    LossReport sums;
    for (std::int64_t step = 0; step < steps_per_epoch; ++step) {
      const std::vector<std::size_t> idx = batches.next();
      std::vector<PairedSample> batch;
      batch.reserve(idx.size());
      std::vector<int> labels;
      labels.reserve(idx.size());
      for (std::size_t k : idx) {
        batch.push_back(cfg.augment_enabled ? augment(train_set[k], cfg.augment, aug_rng)
                                            : train_set[k]);
        labels.push_back(int(train_set[k].label));
      }
      const Tensor images = stack_images(batch);
      const Tensor wbts = stack_wbts(batch);

      // A diverged model can fail anywhere in the step (a non-finite loss,
      // a log of garbage activations, a NaN gradient in the optimizer), so
      // the whole step is one abort scope: on any failure the parameters
      // still hold the last finished step, and that state is preserved.
      try {
        VaeOutput out = model.forward(images, wbts, eps_rng);
        const Tensor ssim = ssim_loss(out.recon_image, images);
        const Tensor bce = bce_loss(out.recon_wbt, wbts);
        const Tensor kl = kl_loss(out.mu, out.logvar);
        const Tensor triplet = triplet_loss(out.mu, mine_semi_hard(out.mu, labels, cfg.triplet),
                                            cfg.triplet);
        const Tensor total = total_loss(ssim, bce, kl, triplet, cfg.loss);
        if (!std::isfinite(total.item())) throw std::runtime_error("non-finite loss");
        backward(total);
        adam_step(model.params(), adam);

        sums.ssim_loss += ssim.item();
        sums.bce_loss += bce.item();
        sums.kl_loss += kl.item();
        sums.triplet_loss += triplet.item();
        sums.total += total.item();
      } catch (const std::exception& e) {
        save(result.latest_checkpoint, epoch - 1, epoch_mean);
        throw std::runtime_error("training diverged in epoch " + std::to_string(epoch) + " (" +
                                 e.what() + "); last good state saved to " +
                                 result.latest_checkpoint);
      }
      for (const ParamRef& p : model.params()) {
        Tensor t = p.tensor;
        t.zero_grad();
      }
    }
    epoch_mean.ssim_loss = sums.ssim_loss / double(steps_per_epoch);
    epoch_mean.bce_loss = sums.bce_loss / double(steps_per_epoch);
    epoch_mean.kl_loss = sums.kl_loss / double(steps_per_epoch);
    epoch_mean.triplet_loss = sums.triplet_loss / double(steps_per_epoch);
    epoch_mean.total = sums.total / double(steps_per_epoch);
    log << csv_row(epoch, epoch_mean) << "\n";
    log.flush();

    if (epoch % cfg.checkpoint_every == 0) save(result.latest_checkpoint, epoch, epoch_mean);
    if (epoch_mean.total < best_total) {
      best_total = epoch_mean.total;
      save(result.best_checkpoint, epoch, epoch_mean);
    }
    result.epochs_run = epoch;
  }
  save(result.final_checkpoint, cfg.epochs, epoch_mean);
  result.last_epoch = epoch_mean;
  return result;
}

namespace {

// Class-wise running sum of (H, W) grids held as flat vectors.
struct GridMean {
  std::vector<double> sum;
  std::int64_t count = 0;

  void add(const std::vector<double>& v, std::size_t offset, std::size_t n) {
    if (sum.empty()) sum.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) sum[i] += v[offset + i];
    ++count;
  }
  std::vector<double> mean() const {
    std::vector<double> out(sum);
    for (double& x : out) x /= double(count);
    return out;
  }
};

nlohmann::json grid_json(const std::vector<double>& flat, std::int64_t h, std::int64_t w) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::int64_t y = 0; y < h; ++y) {
    nlohmann::json row = nlohmann::json::array();
    for (std::int64_t x = 0; x < w; ++x) row.push_back(flat[std::size_t(y * w + x)]);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace

std::vector<PairedSample> checkpoint_split(const Checkpoint& ck, const Dataset& ds,
                                           const std::string& split) {
  if (split == "all") return ds.samples;
  double test_fraction = 0.2;
  if (ck.extra.contains("train_config")) {
    test_fraction = ck.extra["train_config"].value("test_fraction", test_fraction);
  }
  const SplitManifest man = split_by_patient(ds.samples, test_fraction, ck.seed);
  return select_split(ds, man, split);
}

nlohmann::json evaluate(const std::string& checkpoint_path, const std::string& data_dir,
                        const std::string& split, const EvalOptions& opts) {
  const Checkpoint ck = read_checkpoint(checkpoint_path);
  MultiModalVae model = load_model(ck);
  model.set_mode(BatchNorm2d::Mode::eval);

  Dataset ds = load_dataset(data_dir);
  if (ds.image_size != ck.model.image_size) {
    throw std::invalid_argument("dataset is " + std::to_string(ds.image_size) +
                                "px but the checkpoint expects " +
                                std::to_string(ck.model.image_size) + "px");
  }
  const std::vector<PairedSample> eval_set = checkpoint_split(ck, ds, split);
  const std::vector<PairedSample> test_set =
      split == "test" ? eval_set : checkpoint_split(ck, ds, "test");

  const std::int64_t size = ck.model.image_size;
  const std::size_t cells = std::size_t(size) * std::size_t(size);

  // Losses and reconstructions over the requested split, eps = 0.
  double ssim_sum = 0.0, bce_sum = 0.0, kl_sum = 0.0;
  std::vector<double> mu_rows;
  mu_rows.reserve(eval_set.size() * std::size_t(ck.model.latent_dim));
  GridMean recon_mean[kNumClasses];
  for (std::size_t begin = 0; begin < eval_set.size(); begin += std::size_t(opts.batch)) {
    const std::size_t end = std::min(eval_set.size(), begin + std::size_t(opts.batch));
    const std::vector<PairedSample> chunk(eval_set.begin() + std::ptrdiff_t(begin),
                                          eval_set.begin() + std::ptrdiff_t(end));
    const Tensor images = stack_images(chunk);
    const Tensor wbts = stack_wbts(chunk);
    const auto [mu, logvar] = model.encode(images, wbts);
    const auto [recon_image, recon_wbt] = model.decode(mu);
    const double n = double(chunk.size());
    ssim_sum += ssim_loss(recon_image, images).item() * n;
    bce_sum += bce_loss(recon_wbt, wbts).item() * n;
    kl_sum += kl_loss(mu, logvar).item() * n;
    mu_rows.insert(mu_rows.end(), mu.values().begin(), mu.values().end());
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      recon_mean[int(chunk[i].label)].add(recon_wbt.values(), i * cells, cells);
    }
  }
  const Tensor mu_all =
      Tensor::from_data({std::int64_t(eval_set.size()), ck.model.latent_dim}, std::move(mu_rows));
  std::vector<Label> eval_labels;
  std::vector<int> eval_label_ints;
  for (const PairedSample& s : eval_set) {
    eval_labels.push_back(s.label);
    eval_label_ints.push_back(int(s.label));
  }

  LossReport losses;
  losses.ssim_loss = ssim_sum / double(eval_set.size());
  losses.bce_loss = bce_sum / double(eval_set.size());
  losses.kl_loss = kl_sum / double(eval_set.size());
  TripletConfig tcfg;
  LossWeights weights;
  if (ck.extra.contains("train_config")) {
    tcfg.margin = ck.extra["train_config"].value("triplet_margin", tcfg.margin);
    weights.latent_weight = ck.extra["train_config"].value("latent_weight", weights.latent_weight);
  }
  losses.triplet_loss =
      triplet_loss(mu_all, mine_semi_hard(mu_all, eval_label_ints, tcfg), tcfg).item();
  losses.total = losses.ssim_loss + losses.bce_loss +
                 weights.latent_weight * (losses.kl_loss + losses.triplet_loss);

  const double silhouette = silhouette_score(mu_all, eval_labels);

  // Dataset-wide class means of the real WBT grids (the Fig.-style reference).
  GridMean dataset_mean[kNumClasses];
  for (const PairedSample& s : ds.samples) {
    dataset_mean[int(s.label)].add(s.wbt.values(), 0, cells);
  }

  // Held-out reference classifier: nearest class mean on test-split WBT grids.
  NearestClassMean ncm;
  {
    std::vector<double> rows;
    rows.reserve(test_set.size() * cells);
    std::vector<Label> labels;
    for (const PairedSample& s : test_set) {
      rows.insert(rows.end(), s.wbt.values().begin(), s.wbt.values().end());
      labels.push_back(s.label);
    }
    ncm.fit(Tensor::from_data({std::int64_t(test_set.size()), std::int64_t(cells)},
                              std::move(rows)),
            labels);
  }

  // Per-class KDE over test-split embeddings drives generation.
  const Tensor test_mu = split == "test" ? mu_all : embed_samples(model, test_set, opts.batch);
  Rng gen_root(ck.seed);
  nlohmann::json class_means = nlohmann::json::object();
  nlohmann::json fidelity = nlohmann::json::object();
  double fidelity_total = 0.0;
  for (int c = 0; c < kNumClasses; ++c) {
    std::vector<double> pts;
    for (std::size_t i = 0; i < test_set.size(); ++i) {
      if (int(test_set[i].label) != c) continue;
      const auto* base = test_mu.values().data() + i * std::size_t(ck.model.latent_dim);
      pts.insert(pts.end(), base, base + ck.model.latent_dim);
    }
    const std::int64_t n_pts = std::int64_t(pts.size()) / ck.model.latent_dim;
    const KdeModel kde = fit_kde(Tensor::from_data({n_pts, ck.model.latent_dim}, std::move(pts)),
                                 Label(c), ck.seed);

    const std::int64_t n_draw = std::max(opts.fidelity_samples, opts.mean_samples);
    Rng draw_rng = gen_root.fork(std::uint64_t(11 + c));
    const Tensor z = sample_kde(kde, n_draw, draw_rng);
    GridMean gen_mean;
    std::int64_t assigned = 0;
    std::vector<double> cell_buf(cells);
    for (std::int64_t begin = 0; begin < n_draw; begin += opts.batch) {
      const std::int64_t end = std::min(n_draw, begin + opts.batch);
      std::vector<double> zc(z.values().begin() + std::ptrdiff_t(begin * ck.model.latent_dim),
                             z.values().begin() + std::ptrdiff_t(end * ck.model.latent_dim));
      const auto [gen_image, gen_wbt] =
          model.decode(Tensor::from_data({end - begin, ck.model.latent_dim}, std::move(zc)));
      for (std::int64_t i = 0; i < end - begin; ++i) {
        const std::int64_t k = begin + i;
        const std::size_t offset = std::size_t(i) * cells;
        if (k < opts.mean_samples) gen_mean.add(gen_wbt.values(), offset, cells);
        if (k < opts.fidelity_samples) {
          std::copy_n(gen_wbt.values().begin() + std::ptrdiff_t(offset), cells, cell_buf.begin());
          assigned += int(ncm.classify(cell_buf)) == c;
        }
      }
    }

    const std::vector<double> gen = gen_mean.mean();
    const std::vector<double> real = dataset_mean[c].mean();
    double l1 = 0.0;
    for (std::size_t i = 0; i < cells; ++i) l1 += std::abs(gen[i] - real[i]);
    l1 /= double(cells);

    const std::string name = label_name(Label(c));
    class_means[name] = nlohmann::json{{"reconstructed_wbt", grid_json(recon_mean[c].mean(), size, size)},
                                       {"generated_wbt", grid_json(gen, size, size)},
                                       {"dataset_wbt", grid_json(real, size, size)},
                                       {"generated_vs_dataset_l1", l1}};
    const double rate = double(assigned) / double(opts.fidelity_samples);
    fidelity[name] = rate;
    fidelity_total += rate;
  }
  fidelity["overall"] = fidelity_total / double(kNumClasses);

  return nlohmann::json{{"split", split},
                        {"epoch", ck.epoch},
                        {"count", eval_set.size()},
                        {"losses", metrics_json(losses)},
                        {"silhouette", silhouette},
                        {"class_means", class_means},
                        {"generation_fidelity", fidelity}};
}

}  // namespace mmtvae
