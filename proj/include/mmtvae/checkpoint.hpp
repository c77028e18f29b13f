#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmtvae/tensor.hpp"
#include "mmtvae/vae.hpp"

namespace mmtvae {

// On-disk layout (little-endian): magic "MMTV", u32 version, u32 JSON header
// length, header bytes, then tensor records until EOF. Each record: u16 name
// length + name, u8 dtype (0 = f32), u8 rank, u32 extent per axis, raw
// row-major f32 payload. Weights are stored as f32, so a loaded model holds
// exactly the stored values and saving it again is byte-identical.

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

void write_tensor_record(std::ostream& os, const TensorRecord& r);
// Returns false on clean EOF, throws on a truncated or malformed record.
bool read_tensor_record(std::istream& is, TensorRecord& r);

struct Checkpoint {
  ModelConfig model;
  std::int64_t epoch = 0;
  std::uint64_t seed = 0;
  nlohmann::json extra;  // trainer state: optimizer step, metrics snapshot...
  std::vector<TensorRecord> tensors;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Writes parameters, BN running stats, and any extra records (e.g. optimizer
// moments) atomically via a temp file + rename.
void save_checkpoint(const std::string& path, const MultiModalVae& model, std::int64_t epoch,
                     std::uint64_t seed, const nlohmann::json& extra = nlohmann::json::object(),
                     const std::vector<TensorRecord>& extra_tensors = {});

Checkpoint read_checkpoint(const std::string& path);

// Rebuilds the model from the stored config and fills every parameter and
// buffer from the records; missing or misshapen records are errors. Records
// that belong to no model tensor (optimizer state) are ignored here.
MultiModalVae load_model(const Checkpoint& ck);

}  // namespace mmtvae
