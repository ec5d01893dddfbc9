#pragma once

// Binary layout:
//   "MTAD1" | u32 header_len | header JSON (version, model config, sample count)
//   per sample: u32 id_len | id bytes | u32 seq | seq x u32 token ids
//               | seq x u8 padding | (n_layers + 1) x seq x d_model f32
// All integers and floats little-endian.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mta/corpus.hpp"
#include "mta/model.hpp"

namespace mta {

struct HiddenRecord {
  std::string sample_id;
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> padding;
  std::vector<std::vector<float>> states;  // n_layers + 1 arrays of seq * d_model

  bool operator==(const HiddenRecord&) const = default;
};

struct HiddenDump {
  ModelConfig model;
  std::vector<HiddenRecord> records;

  bool operator==(const HiddenDump&) const = default;
};

void write_hidden_dump(const std::filesystem::path& path, const HiddenDump& dump);
// Validates magic, version and dimensions; truncation and trailing bytes are
// reported with the byte offset.
HiddenDump read_hidden_dump(const std::filesystem::path& path);

// Runs the model on each sample and captures every layer's hidden states.
HiddenDump export_hidden(const TransformerLM& model, const std::vector<EncodedSample>& samples);

// Single-row trace ([1, seq, d] states, no logits) for one record.
ForwardTrace trace_from_record(const HiddenRecord& record, const ModelConfig& model);

}  // namespace mta
