#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mmtvae/checkpoint.hpp"
#include "mmtvae/rng.hpp"
#include "mmtvae/tensor.hpp"
#include "mmtvae/vae.hpp"

using namespace mmtvae;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

std::vector<double> random_values(std::int64_t n, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (double& x : v) x = rng.uniform();
  return v;
}

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name) : path("/tmp/mmtvae_test_" + name) {}
  ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("tensor records round-trip through a stream") {
  std::stringstream ss;
  TensorRecord a{"alpha", {2, 3}, {1.f, 2.f, 3.f, 4.f, 5.f, 6.f}};
  TensorRecord b{"beta", {4}, {-1.f, 0.f, 0.5f, 2.25f}};
  write_tensor_record(ss, a);
  write_tensor_record(ss, b);

  TensorRecord r;
  REQUIRE(read_tensor_record(ss, r));
  CHECK(r.name == "alpha");
  CHECK(r.shape == Shape{2, 3});
  CHECK(r.data == a.data);
  REQUIRE(read_tensor_record(ss, r));
  CHECK(r.name == "beta");
  CHECK(r.data == b.data);
  CHECK_FALSE(read_tensor_record(ss, r));  // clean EOF

  TensorRecord bad{"x", {2}, {1.f}};
  std::stringstream ss2;
  CHECK_THROWS_AS(write_tensor_record(ss2, bad), std::invalid_argument);
}

TEST_CASE("truncated records are rejected") {
  std::stringstream ss;
  write_tensor_record(ss, {"t", {3}, {1.f, 2.f, 3.f}});
  std::string bytes = ss.str();
  std::stringstream cut(bytes.substr(0, bytes.size() - 2));
  TensorRecord r;
  CHECK_THROWS_AS(read_tensor_record(cut, r), std::runtime_error);
}

TEST_CASE("checkpoint header carries config, epoch, seed, extra") {
  TempFile f("header.ckpt");
  MultiModalVae m(ModelConfig::desk(), 5);
  nlohmann::json extra{{"adam_step", 17}, {"note", "hello"}};
  save_checkpoint(f.path, m, 42, 12345, extra);

  Checkpoint ck = read_checkpoint(f.path);
  CHECK(ck.model == ModelConfig::desk());
  CHECK(ck.epoch == 42);
  CHECK(ck.seed == 12345);
  CHECK(ck.extra.at("adam_step") == 17);
  CHECK(ck.extra.at("note") == "hello");
  CHECK(ck.tensors.size() == m.params().size() + m.buffers().size());
}

TEST_CASE("save -> load -> save is byte-identical") {
  TempFile f1("roundtrip1.ckpt");
  TempFile f2("roundtrip2.ckpt");
  MultiModalVae m(ModelConfig::desk(), 8);
  save_checkpoint(f1.path, m, 7, 99);

  MultiModalVae loaded = load_model(read_checkpoint(f1.path));
  save_checkpoint(f2.path, loaded, 7, 99);
  CHECK(slurp(f1.path) == slurp(f2.path));
}

TEST_CASE("round-trip reproduces forward outputs bit-exactly") {
  TempFile f1("fwd1.ckpt");
  TempFile f2("fwd2.ckpt");
  MultiModalVae m(ModelConfig::desk(), 21);
  // Move the BN running stats off their init so buffers matter.
  Rng rng(3);
  Tensor img = Tensor::from_data({2, 3, 32, 32}, random_values(2 * 3 * 32 * 32, rng));
  Tensor wbt = Tensor::from_data({2, 1, 32, 32}, random_values(2 * 32 * 32, rng));
  m.encode(img, wbt);

  save_checkpoint(f1.path, m, 0, 0);
  MultiModalVae a = load_model(read_checkpoint(f1.path));
  save_checkpoint(f2.path, a, 0, 0);
  MultiModalVae b = load_model(read_checkpoint(f2.path));

  a.set_mode(BatchNorm2d::Mode::eval);
  b.set_mode(BatchNorm2d::Mode::eval);
  auto [mu_a, lv_a] = a.encode(img, wbt);
  auto [mu_b, lv_b] = b.encode(img, wbt);
  CHECK(mu_a.values() == mu_b.values());
  CHECK(lv_a.values() == lv_b.values());
  auto [ri_a, rw_a] = a.decode(mu_a);
  auto [ri_b, rw_b] = b.decode(mu_b);
  CHECK(ri_a.values() == ri_b.values());
  CHECK(rw_a.values() == rw_b.values());
}

TEST_CASE("extra tensor records survive and are ignored by load_model") {
  TempFile f("extra.ckpt");
  MultiModalVae m(ModelConfig::desk(), 2);
  std::vector<TensorRecord> opt{{"adam.m.first", {4}, {0.f, 1.f, 2.f, 3.f}}};
  save_checkpoint(f.path, m, 1, 2, nlohmann::json::object(), opt);

  Checkpoint ck = read_checkpoint(f.path);
  bool found = false;
  for (const auto& r : ck.tensors)
    if (r.name == "adam.m.first") {
      found = true;
      CHECK(r.data == opt[0].data);
    }
  CHECK(found);
  CHECK_NOTHROW(load_model(ck));
}

TEST_CASE("malformed checkpoints are rejected with clear errors") {
  TempFile f("bad.ckpt");
  {
    std::ofstream os(f.path, std::ios::binary);
    os << "NOPE";
  }
  CHECK_THROWS_AS(read_checkpoint(f.path), std::runtime_error);
  CHECK_THROWS_AS(read_checkpoint("/nonexistent/path.ckpt"), std::runtime_error);

  // A record with the wrong shape for its name.
  TempFile f2("shape.ckpt");
  MultiModalVae m(ModelConfig::desk(), 3);
  save_checkpoint(f2.path, m, 0, 0);
  Checkpoint ck = read_checkpoint(f2.path);
  ck.tensors[0].shape = {1};
  ck.tensors[0].data = {1.f};
  CHECK_THROWS_AS(load_model(ck), std::runtime_error);

  // A missing parameter record.
  Checkpoint ck2 = read_checkpoint(f2.path);
  ck2.tensors.erase(ck2.tensors.begin());
  CHECK_THROWS_AS(load_model(ck2), std::runtime_error);
}
