#include "mmtvae/checkpoint.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>

namespace mmtvae {

namespace {

constexpr char kMagic[4] = {'M', 'M', 'T', 'V'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_raw(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace

void write_tensor_record(std::ostream& os, const TensorRecord& r) {
  if (r.name.size() > 0xffff) throw std::invalid_argument("tensor record: name too long");
  if (shape_numel(r.shape) != static_cast<std::int64_t>(r.data.size()))
    throw std::invalid_argument("tensor record '" + r.name + "': data does not match shape");
  write_raw<std::uint16_t>(os, static_cast<std::uint16_t>(r.name.size()));
  os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
  write_raw<std::uint8_t>(os, 0);  // dtype f32
  write_raw<std::uint8_t>(os, static_cast<std::uint8_t>(r.shape.size()));
  for (std::int64_t e : r.shape) write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(e));
  os.write(reinterpret_cast<const char*>(r.data.data()),
           static_cast<std::streamsize>(r.data.size() * sizeof(float)));
}

bool read_tensor_record(std::istream& is, TensorRecord& r) {
  std::uint16_t name_len;
  is.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
  if (is.eof()) return false;
  if (!is) throw std::runtime_error("checkpoint: truncated record header");
  r.name.resize(name_len);
  is.read(r.name.data(), name_len);
  if (!is) throw std::runtime_error("checkpoint: truncated record name");
  const auto dtype = read_raw<std::uint8_t>(is);
  if (dtype != 0)
    throw std::runtime_error("checkpoint: unsupported dtype " + std::to_string(dtype) +
                             " in record '" + r.name + "'");
  const auto rank = read_raw<std::uint8_t>(is);
  r.shape.assign(rank, 0);
  std::int64_t numel = 1;
  for (int i = 0; i < rank; ++i) {
    r.shape[i] = read_raw<std::uint32_t>(is);
    numel *= r.shape[i];
  }
  r.data.resize(static_cast<std::size_t>(numel));
  is.read(reinterpret_cast<char*>(r.data.data()),
          static_cast<std::streamsize>(r.data.size() * sizeof(float)));
  if (!is) throw std::runtime_error("checkpoint: truncated payload in record '" + r.name + "'");
  return true;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size},     {"image_channels", c.image_channels},
                     {"wbt_channels", c.wbt_channels}, {"latent_dim", c.latent_dim},
                     {"enc_widths", c.enc_widths},     {"dec_widths", c.dec_widths}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("image_size").get_to(c.image_size);
  j.at("image_channels").get_to(c.image_channels);
  j.at("wbt_channels").get_to(c.wbt_channels);
  j.at("latent_dim").get_to(c.latent_dim);
  j.at("enc_widths").get_to(c.enc_widths);
  j.at("dec_widths").get_to(c.dec_widths);
}

void save_checkpoint(const std::string& path, const MultiModalVae& model, std::int64_t epoch,
                     std::uint64_t seed, const nlohmann::json& extra,
                     const std::vector<TensorRecord>& extra_tensors) {
  nlohmann::json header{{"model", model.config()}, {"epoch", epoch}, {"seed", seed}};
  if (!extra.empty()) header["extra"] = extra;
  const std::string header_text = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open '" + tmp + "' for writing");
    os.write(kMagic, 4);
    write_raw<std::uint32_t>(os, kVersion);
    write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(header_text.size()));
    os.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));

    auto write_doubles = [&](const std::string& name, const Shape& shape,
                             const std::vector<double>& vals) {
      TensorRecord r{name, shape, {}};
      r.data.reserve(vals.size());
      for (double v : vals) r.data.push_back(static_cast<float>(v));
      write_tensor_record(os, r);
    };
    for (const auto& p : model.params()) write_doubles(p.name, p.tensor.shape(), p.tensor.values());
    for (const auto& b : model.buffers()) write_doubles(b.name, {b.extent}, *b.data);
    for (const auto& r : extra_tensors) write_tensor_record(os, r);
    if (!os) throw std::runtime_error("checkpoint: write failed on '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("checkpoint: cannot move '" + tmp + "' into place");
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != std::string(kMagic, 4))
    throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
  const auto version = read_raw<std::uint32_t>(is);
  if (version != kVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  const auto header_len = read_raw<std::uint32_t>(is);
  std::string header_text(header_len, '\0');
  is.read(header_text.data(), header_len);
  if (!is) throw std::runtime_error("checkpoint: truncated header");

  Checkpoint ck;
  nlohmann::json header = nlohmann::json::parse(header_text);
  header.at("model").get_to(ck.model);
  header.at("epoch").get_to(ck.epoch);
  header.at("seed").get_to(ck.seed);
  if (header.contains("extra")) ck.extra = header["extra"];

  TensorRecord r;
  while (read_tensor_record(is, r)) ck.tensors.push_back(std::move(r));
  return ck;
}

MultiModalVae load_model(const Checkpoint& ck) {
  MultiModalVae model(ck.model, 0);
  std::map<std::string, const TensorRecord*> by_name;
  for (const auto& r : ck.tensors) by_name[r.name] = &r;

  auto fill = [&](const std::string& name, const Shape& shape, std::vector<double>& dst) {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
    const TensorRecord& r = *it->second;
    if (r.shape != shape)
      throw std::runtime_error("checkpoint: tensor '" + name + "' has shape " +
                               shape_str(r.shape) + ", model expects " + shape_str(shape));
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<double>(r.data[i]);
  };
  for (const auto& p : model.params()) {
    Tensor t = p.tensor;
    fill(p.name, t.shape(), t.mutable_values());
  }
  for (const auto& b : model.buffers()) fill(b.name, {b.extent}, *b.data);
  return model;
}

}  // namespace mmtvae
