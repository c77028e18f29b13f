#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmtvae/checkpoint.hpp"
#include "mmtvae/data.hpp"
#include "mmtvae/kde.hpp"
#include "mmtvae/netpbm.hpp"
#include "mmtvae/projection.hpp"
#include "mmtvae/train.hpp"
#include "mmtvae/vae.hpp"

using namespace mmtvae;

namespace {

nlohmann::json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  nlohmann::json j;
  in >> j;
  return j;
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("failed writing '" + path + "'");
}

// Copies row i of an (n, c, h, w) batch out as a standalone (c, h, w) tensor.
Tensor batch_row(const Tensor& batch, std::int64_t i) {
  const Shape& s = batch.shape();
  const std::int64_t plane = s[1] * s[2] * s[3];
  std::vector<double> v(batch.values().begin() + i * plane,
                        batch.values().begin() + (i + 1) * plane);
  return Tensor::from_data({s[1], s[2], s[3]}, std::move(v));
}

std::string number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct LoadedModel {
  Checkpoint ck;
  MultiModalVae model;
};

LoadedModel open_checkpoint(const std::string& path) {
  Checkpoint ck = read_checkpoint(path);
  MultiModalVae model = load_model(ck);
  model.set_mode(BatchNorm2d::Mode::eval);
  return {std::move(ck), std::move(model)};
}

Dataset load_matching_dataset(const std::string& dir, const Checkpoint& ck) {
  Dataset ds = load_dataset(dir);
  if (ds.image_size != ck.model.image_size) {
    throw std::runtime_error("dataset is " + std::to_string(ds.image_size) +
                             "px but the checkpoint expects " +
                             std::to_string(ck.model.image_size) + "px");
  }
  return ds;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"training and generation toolkit for paired otoscopy / wideband tympanometry"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  std::string config_path;
  std::string preset = "paper";
  app.add_option("--seed", seed, "root RNG seed (default 0)");
  app.add_option("--config", config_path, "JSON file overriding preset defaults")
      ->check(CLI::ExistingFile);
  app.add_option("--preset", preset, "base configuration: paper or desk")
      ->check(CLI::IsMember({"paper", "desk"}));

  // synth ---------------------------------------------------------------
  auto* synth = app.add_subcommand("synth", "generate a synthetic paired-modality dataset");
  std::string synth_out;
  std::int64_t synth_per_class = 100;
  std::int64_t synth_size = 0;  // 0: follow the preset
  synth->add_option("--out", synth_out, "output dataset directory")->required();
  synth->add_option("--per-class", synth_per_class, "samples per class (default 100)");
  synth->add_option("--image-size", synth_size, "pixels per side (default: preset's)");

  // train ---------------------------------------------------------------
  auto* train_cmd = app.add_subcommand("train", "optimize a model on a dataset directory");
  std::string train_data, train_out;
  std::int64_t train_epochs = 0, train_pcb = 0, train_ckpt_every = 0;
  double train_lr = -1.0, train_test_fraction = -1.0;
  bool train_no_augment = false;
  train_cmd->add_option("--data", train_data, "dataset directory")->required();
  train_cmd->add_option("--out", train_out, "run directory for checkpoints and metrics")
      ->required();
  train_cmd->add_option("--epochs", train_epochs, "override epoch count");
  train_cmd->add_option("--per-class-batch", train_pcb, "override per-class batch size");
  train_cmd->add_option("--lr", train_lr, "override learning rate");
  train_cmd->add_option("--test-fraction", train_test_fraction, "override held-out fraction");
  train_cmd->add_option("--checkpoint-every", train_ckpt_every, "override checkpoint cadence");
  train_cmd->add_flag("--no-augment", train_no_augment, "disable training-time augmentation");

  // embed ---------------------------------------------------------------
  auto* embed = app.add_subcommand("embed", "write latent means for a dataset split to CSV");
  std::string embed_ckpt, embed_data, embed_split = "test", embed_out;
  embed->add_option("--checkpoint", embed_ckpt, "model checkpoint")->required();
  embed->add_option("--data", embed_data, "dataset directory")->required();
  embed->add_option("--split", embed_split, "train, test, or all (default test)")
      ->check(CLI::IsMember({"train", "test", "all"}));
  embed->add_option("--out", embed_out, "output CSV path")->required();

  // fit-kde -------------------------------------------------------------
  auto* fitkde = app.add_subcommand(
      "fit-kde", "fit one latent density per class from a checkpoint and dataset");
  std::string kde_ckpt, kde_data, kde_split = "test", kde_out;
  fitkde->add_option("--checkpoint", kde_ckpt, "model checkpoint")->required();
  fitkde->add_option("--data", kde_data, "dataset directory")->required();
  fitkde->add_option("--split", kde_split, "split to embed (default test)")
      ->check(CLI::IsMember({"train", "test", "all"}));
  fitkde->add_option("--out", kde_out, "directory receiving kde_<class>.bin files")->required();

  // sample --------------------------------------------------------------
  auto* sample = app.add_subcommand("sample", "draw class-conditional samples and decode them");
  std::string sample_ckpt, sample_kde_path, sample_class, sample_out;
  std::int64_t sample_n = 6;
  sample->add_option("--checkpoint", sample_ckpt, "model checkpoint")->required();
  sample->add_option("--kde", sample_kde_path, "fitted density file, or a fit-kde output dir")
      ->required();
  sample->add_option("--class", sample_class, "class to sample: AOM, OME, or NOE")->required();
  sample->add_option("--n", sample_n, "number of samples (default 6)");
  sample->add_option("--out", sample_out, "output directory")->required();

  // project -------------------------------------------------------------
  auto* project = app.add_subcommand("project", "project an embedding CSV to 2-D");
  std::string proj_in, proj_out, proj_method = "pca";
  double proj_perplexity = 30.0;
  std::int64_t proj_iterations = 1000;
  project->add_option("--in", proj_in, "embedding CSV from `embed`")->required();
  project->add_option("--method", proj_method, "pca or tsne (default pca)")
      ->check(CLI::IsMember({"pca", "tsne"}));
  project->add_option("--perplexity", proj_perplexity, "t-SNE perplexity (default 30)");
  project->add_option("--iterations", proj_iterations, "t-SNE iterations (default 1000)");
  project->add_option("--out", proj_out, "output CSV path")->required();

  // eval ----------------------------------------------------------------
  auto* eval_cmd = app.add_subcommand("eval", "losses, silhouette, and generation fidelity");
  std::string eval_ckpt, eval_data, eval_split = "test", eval_out;
  eval_cmd->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
  eval_cmd->add_option("--data", eval_data, "dataset directory")->required();
  eval_cmd->add_option("--split", eval_split, "train or test (default test)")
      ->check(CLI::IsMember({"train", "test"}));
  eval_cmd->add_option("--out", eval_out, "report JSON path (default: stdout)");

  // resample-wbt --------------------------------------------------------
  auto* resample = app.add_subcommand(
      "resample-wbt", "regrid a raw absorbance measurement onto the model's fixed axes");
  std::string rs_in, rs_out;
  std::int64_t rs_steps = 64;
  resample->add_option("--in", rs_in, "JSON with pressures, frequencies, absorbance rows")
      ->required();
  resample->add_option("--steps", rs_steps, "target steps per axis (default 64)");
  resample->add_option("--out", rs_out, "output JSON path (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << "\n";
    return 2;
  }

  try {
    TrainConfig cfg = (preset == "desk") ? TrainConfig::desk() : TrainConfig::paper();
    if (!config_path.empty()) from_json(load_json_file(config_path), cfg);
    if (app.count("--seed") > 0) cfg.seed = seed;

    if (synth->parsed()) {
      const std::int64_t size = synth_size > 0 ? synth_size : cfg.model.image_size;
      const Dataset ds = synth_dataset(synth_per_class, size, cfg.seed);
      save_dataset(synth_out, ds);
      std::cout << "wrote " << ds.samples.size() << " samples at " << size << "px to "
                << synth_out << "\n";
    } else if (train_cmd->parsed()) {
      if (train_epochs > 0) cfg.epochs = train_epochs;
      if (train_pcb > 0) cfg.per_class_batch = train_pcb;
      if (train_lr >= 0.0) cfg.learning_rate = train_lr;
      if (train_test_fraction >= 0.0) cfg.test_fraction = train_test_fraction;
      if (train_ckpt_every > 0) cfg.checkpoint_every = train_ckpt_every;
      if (train_no_augment) cfg.augment_enabled = false;
      const TrainResult res = train(train_data, train_out, cfg);
      std::cout << "trained " << res.epochs_run << " epochs; final total loss "
                << number(res.last_epoch.total) << "\n"
                << "checkpoint: " << res.final_checkpoint << "\n"
                << "metrics:    " << res.metrics_csv << "\n";
    } else if (embed->parsed()) {
      LoadedModel lm = open_checkpoint(embed_ckpt);
      const Dataset ds = load_matching_dataset(embed_data, lm.ck);
      const std::vector<PairedSample> set = checkpoint_split(lm.ck, ds, embed_split);
      if (set.empty()) throw std::runtime_error("split '" + embed_split + "' is empty");
      const Tensor mus = embed_samples(lm.model, set);
      std::vector<std::string> ids;
      std::vector<Label> labels;
      for (const PairedSample& s : set) {
        ids.push_back(s.sample_id);
        labels.push_back(s.label);
      }
      write_embedding_csv(embed_out, ids, labels, mus);
      std::cout << "wrote " << set.size() << " embeddings to " << embed_out << "\n";
    } else if (fitkde->parsed()) {
      LoadedModel lm = open_checkpoint(kde_ckpt);
      const Dataset ds = load_matching_dataset(kde_data, lm.ck);
      const std::vector<PairedSample> set = checkpoint_split(lm.ck, ds, kde_split);
      const Tensor mus = embed_samples(lm.model, set);
      const std::int64_t d = mus.shape()[1];
      std::filesystem::create_directories(kde_out);
      for (int c = 0; c < kNumClasses; ++c) {
        std::vector<double> rows;
        for (std::size_t i = 0; i < set.size(); ++i) {
          if (set[i].label != Label(c)) continue;
          const auto base = mus.values().begin() + std::int64_t(i) * d;
          rows.insert(rows.end(), base, base + d);
        }
        if (rows.empty())
          throw std::runtime_error(std::string("split has no ") + label_name(Label(c)) +
                                   " samples to fit");
        const std::int64_t n_rows = std::int64_t(rows.size()) / d;
        const Tensor points = Tensor::from_data({n_rows, d}, std::move(rows));
        const KdeModel m = fit_kde(points, Label(c), lm.ck.seed);
        const std::string path = kde_out + "/kde_" + label_name(Label(c)) + ".bin";
        save_kde(path, m);
        std::cout << label_name(Label(c)) << ": " << m.count() << " centers, bandwidth "
                  << number(m.bandwidth) << " -> " << path << "\n";
      }
    } else if (sample->parsed()) {
      LoadedModel lm = open_checkpoint(sample_ckpt);
      const Label cls = parse_label(sample_class);
      std::string kde_file = sample_kde_path;
      if (std::filesystem::is_directory(kde_file))
        kde_file += "/kde_" + std::string(label_name(cls)) + ".bin";
      const KdeModel m = load_kde(kde_file);
      if (m.label != cls)
        throw std::runtime_error(std::string("'") + kde_file + "' holds a " +
                                 label_name(m.label) + " density, not " + label_name(cls));
      if (sample_n < 1) throw std::runtime_error("--n must be positive");

      Rng rng(cfg.seed);
      const Tensor z = sample_kde(m, sample_n, rng);
      auto [images, wbts] = lm.model.decode(z);
      std::filesystem::create_directories(sample_out);

      std::ofstream csv(sample_out + "/samples.csv", std::ios::trunc);
      if (!csv) throw std::runtime_error("cannot open '" + sample_out + "/samples.csv'");
      csv << "sample_id,pressure_index,frequency_index,absorbance\n";
      const std::int64_t size = lm.ck.model.image_size;
      for (std::int64_t i = 0; i < sample_n; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "sample_%03lld", static_cast<long long>(i));
        write_ppm(sample_out + "/" + name + ".ppm", batch_row(images, i));
        const Tensor grid = batch_row(wbts, i);
        write_pgm(sample_out + "/" + name + ".pgm", grid);
        for (std::int64_t r = 0; r < size; ++r)
          for (std::int64_t c = 0; c < size; ++c)
            csv << name << "," << r << "," << c << ","
                << number(grid.values()[std::size_t(r * size + c)]) << "\n";
      }
      if (!csv) throw std::runtime_error("failed writing '" + sample_out + "/samples.csv'");
      std::cout << "wrote " << sample_n << " " << label_name(cls) << " samples to " << sample_out
                << "\n";
    } else if (project->parsed()) {
      const EmbeddingTable table = read_embedding_csv(proj_in);
      ProjectionResult r;
      r.method = proj_method;
      r.sample_ids = table.sample_ids;
      r.labels = table.labels;
      if (proj_method == "tsne") {
        TsneConfig tc;
        tc.perplexity = proj_perplexity;
        tc.iterations = int(proj_iterations);
        r.coords = tsne_project(table.mus, tc, cfg.seed);
      } else {
        r.coords = pca_project(table.mus);
      }
      write_projection_csv(proj_out, r);
      std::cout << "projected " << table.sample_ids.size() << " points (" << proj_method
                << ") to " << proj_out << "\n";
    } else if (eval_cmd->parsed()) {
      const nlohmann::json rep = evaluate(eval_ckpt, eval_data, eval_split);
      if (eval_out.empty()) {
        std::cout << rep.dump(2) << "\n";
      } else {
        write_json_file(eval_out, rep);
        std::cout << "silhouette " << number(rep.at("silhouette").get<double>())
                  << ", generation fidelity "
                  << number(rep.at("generation_fidelity").at("overall").get<double>()) << " -> "
                  << eval_out << "\n";
      }
    } else if (resample->parsed()) {
      const nlohmann::json in = load_json_file(rs_in);
      WbtRawGrid raw;
      raw.pressures = in.at("pressures").get<std::vector<double>>();
      raw.frequencies = in.at("frequencies").get<std::vector<double>>();
      for (const auto& row : in.at("absorbance")) {
        const std::vector<double> r = row.get<std::vector<double>>();
        raw.absorbance.insert(raw.absorbance.end(), r.begin(), r.end());
      }
      const Tensor grid = resample_wbt(raw, rs_steps);

      nlohmann::json out;
      std::vector<double> ps(std::size_t(rs_steps), 0.0), fs(std::size_t(rs_steps), 0.0);
      for (std::int64_t i = 0; i < rs_steps; ++i) {
        ps[std::size_t(i)] = 180.0 + (-280.0 - 180.0) * double(i) / double(rs_steps - 1);
        fs[std::size_t(i)] = 226.0 + (4000.0 - 226.0) * double(i) / double(rs_steps - 1);
      }
      out["pressures"] = ps;
      out["frequencies"] = fs;
      nlohmann::json rows = nlohmann::json::array();
      for (std::int64_t r = 0; r < rs_steps; ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (std::int64_t c = 0; c < rs_steps; ++c)
          row.push_back(grid.values()[std::size_t(r * rs_steps + c)]);
        rows.push_back(std::move(row));
      }
      out["absorbance"] = std::move(rows);
      if (rs_out.empty())
        std::cout << out.dump(2) << "\n";
      else
        write_json_file(rs_out, out);
    }
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
