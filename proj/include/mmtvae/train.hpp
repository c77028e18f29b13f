#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "mmtvae/adam.hpp"
#include "mmtvae/checkpoint.hpp"
#include "mmtvae/data.hpp"
#include "mmtvae/losses.hpp"
#include "mmtvae/vae.hpp"

namespace mmtvae {

struct TrainConfig {
  ModelConfig model;
  std::int64_t epochs = 200;
  std::int64_t per_class_batch = 20;
  std::uint64_t seed = 0;
  double learning_rate = 0.0004;
  LossWeights loss;
  TripletConfig triplet;
  AugmentConfig augment;
  bool augment_enabled = true;
  double test_fraction = 0.2;
  std::int64_t checkpoint_every = 50;

  // Full-size recipe: 64x64 model, 5000 epochs, 20 pairs per class.
  static TrainConfig paper();
  // Minutes-scale recipe: 32x32 model, 200 epochs.
  static TrainConfig desk();

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
// Fields absent from j keep their current values, so a partial config JSON
// overlays a preset.
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const AugmentConfig& c);
void from_json(const nlohmann::json& j, AugmentConfig& c);

struct TrainResult {
  std::string final_checkpoint;
  std::string best_checkpoint;
  std::string latest_checkpoint;
  std::string metrics_csv;
  LossReport last_epoch;
  std::int64_t epochs_run = 0;
};

// Loads the dataset, splits it patient-wise, and runs the optimization loop:
// per batch — balanced sampling, augmentation, forward, composite loss with
// semi-hard mining on mu, backward, Adam; per epoch — a CSV row of loss
// means; checkpoints every checkpoint_every epochs (latest), on improvement
// of the epoch-mean total (best), and at the end (final). A non-finite loss
// stops training after saving the last good parameters as the latest
// checkpoint.
TrainResult train(const std::string& data_dir, const std::string& out_dir,
                  const TrainConfig& cfg);

// Resolves a manifest's split ("train" or "test") to its samples, in
// manifest order.
std::vector<PairedSample> select_split(const Dataset& ds, const SplitManifest& man,
                                       const std::string& split);

// Deterministic mu rows (n, latent_dim) for the samples: eps = 0, chunked
// forward passes. The model should be in eval mode.
Tensor embed_samples(MultiModalVae& model, const std::vector<PairedSample>& samples,
                     std::int64_t batch = 32);

struct EvalOptions {
  std::int64_t fidelity_samples = 300;  // generated per class for the class-assignment rate
  std::int64_t mean_samples = 500;      // generated per class for the mean grid
  std::int64_t batch = 32;              // forward-pass chunk size
};

// Recomputes the patient split a checkpoint was trained with (fraction from
// its stored config, fallback 0.2) and returns the requested side; "all"
// returns every sample.
std::vector<PairedSample> checkpoint_split(const Checkpoint& ck, const Dataset& ds,
                                           const std::string& split);

// Restores the checkpoint, recomputes the patient split it was trained with,
// and reports on the requested split ("train" or "test"): per-term losses,
// silhouette of the mu embedding, per-class mean reconstructed / generated /
// dataset WBT grids, and the rate at which generated samples are assigned to
// their requested class by a nearest-class-mean classifier fit on held-out
// WBT grids. Generation draws from per-class KDEs fit on test-split
// embeddings. Keys: "losses", "silhouette", "class_means",
// "generation_fidelity".
nlohmann::json evaluate(const std::string& checkpoint_path, const std::string& data_dir,
                        const std::string& split, const EvalOptions& opts = {});

}  // namespace mmtvae
