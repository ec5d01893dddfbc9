#include "mta/hidden_dump.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

#include "mta/binary_io.hpp"

namespace mta {

using nlohmann::json;

namespace {

constexpr char kMagic[5] = {'M', 'T', 'A', 'D', '1'};
constexpr int kVersion = 1;

void write_u32(std::ostream& os, std::size_t v) { binio::write_le(os, static_cast<std::uint32_t>(v)); }

std::size_t offset_of(std::istream& is) { return static_cast<std::size_t>(static_cast<long long>(is.tellg())); }

[[noreturn]] void reject(const std::filesystem::path& path, std::size_t offset, const std::string& why) {
  throw Error("hidden dump " + path.string() + ": " + why + " at byte offset " + std::to_string(offset));
}

}  // namespace

void write_hidden_dump(const std::filesystem::path& path, const HiddenDump& dump) {
  const std::size_t d = dump.model.d_model;
  const std::size_t n_states = dump.model.n_layers + 1;
  json header{{"version", kVersion},
              {"model", json::parse(model_config_to_json_text(dump.model))},
              {"n_samples", dump.records.size()},
              {"dtype", "f32le"}};
  const std::string h = header.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write hidden dump " + path.string());
  os.write(kMagic, sizeof kMagic);
  write_u32(os, h.size());
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& r : dump.records) {
    const std::size_t seq = r.ids.size();
    if (r.padding.size() != seq || r.states.size() != n_states) {
      throw Error("hidden dump record " + r.sample_id + " is inconsistent with the header");
    }
    write_u32(os, r.sample_id.size());
    os.write(r.sample_id.data(), static_cast<std::streamsize>(r.sample_id.size()));
    write_u32(os, seq);
    for (auto id : r.ids) binio::write_le(os, static_cast<std::uint32_t>(id));
    for (auto p : r.padding) binio::write_le(os, static_cast<std::uint8_t>(p ? 1 : 0));
    for (const auto& layer : r.states) {
      if (layer.size() != seq * d) throw Error("hidden dump record " + r.sample_id + ": state size mismatch");
      for (float v : layer) binio::write_f32(os, v);
    }
  }
  if (!os) throw Error("failed writing hidden dump " + path.string());
}

HiddenDump read_hidden_dump(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open hidden dump " + path.string());

  char magic[sizeof kMagic] = {};
  is.read(magic, sizeof magic);
  if (is.gcount() != static_cast<std::streamsize>(sizeof magic) || !std::equal(magic, magic + sizeof magic, kMagic)) {
    reject(path, 0, "bad magic");
  }
  const std::size_t header_len = binio::read_le<std::uint32_t>(is, "header length");
  const std::size_t header_at = offset_of(is);
  std::string h(header_len, '\0');
  is.read(h.data(), static_cast<std::streamsize>(header_len));
  if (static_cast<std::size_t>(is.gcount()) != header_len) reject(path, header_at, "truncated header");

  HiddenDump dump;
  std::size_t n_samples = 0;
  try {
    const json header = json::parse(h);
    if (header.at("version").get<int>() != kVersion) reject(path, header_at, "unsupported version");
    if (header.at("dtype").get<std::string>() != "f32le") reject(path, header_at, "unsupported dtype");
    dump.model = model_config_from_json_text(header.at("model").dump());
    dump.model.validate();
    n_samples = header.at("n_samples").get<std::size_t>();
  } catch (const json::exception& e) {
    reject(path, header_at, std::string("corrupt header (") + e.what() + ")");
  } catch (const Error& e) {
    if (std::string(e.what()).rfind("hidden dump", 0) == 0) throw;
    reject(path, header_at, std::string("corrupt header (") + e.what() + ")");
  }

  const std::size_t d = dump.model.d_model;
  const std::size_t n_states = dump.model.n_layers + 1;
  for (std::size_t s = 0; s < n_samples; ++s) {
    HiddenRecord r;
    const std::size_t id_len = binio::read_le<std::uint32_t>(is, "sample id length");
    const std::size_t id_at = offset_of(is);
    r.sample_id.assign(id_len, '\0');
    is.read(r.sample_id.data(), static_cast<std::streamsize>(id_len));
    if (static_cast<std::size_t>(is.gcount()) != id_len) reject(path, id_at, "truncated sample id");
    const std::size_t seq_at = offset_of(is);
    const std::size_t seq = binio::read_le<std::uint32_t>(is, "sequence length");
    if (seq == 0 || seq > dump.model.max_seq_len) reject(path, seq_at, "sequence length outside 1..max_seq_len");
    r.ids.resize(seq);
    for (auto& id : r.ids) {
      const std::size_t at = offset_of(is);
      const std::uint32_t raw = binio::read_le<std::uint32_t>(is, "token id");
      if (raw >= dump.model.vocab_size) reject(path, at, "token id outside vocabulary");
      id = static_cast<std::int32_t>(raw);
    }
    r.padding.resize(seq);
    for (auto& p : r.padding) {
      const std::size_t at = offset_of(is);
      p = binio::read_le<std::uint8_t>(is, "padding flag");
      if (p > 1) reject(path, at, "padding flag not 0/1");
    }
    r.states.assign(n_states, std::vector<float>(seq * d));
    for (auto& layer : r.states)
      for (float& v : layer) v = binio::read_f32(is, "hidden state");
    dump.records.push_back(std::move(r));
  }
  if (is.peek() != std::char_traits<char>::eof()) reject(path, offset_of(is), "trailing bytes");
  return dump;
}

HiddenDump export_hidden(const TransformerLM& model, const std::vector<EncodedSample>& samples) {
  NoGradScope no_grad;
  HiddenDump dump;
  dump.model = model.config();
  const std::size_t d = model.config().d_model;
  for (const auto& s : samples) {
    TokenBatch batch;
    batch.batch = 1;
    batch.seq = s.encoding.ids.size();
    batch.ids = s.encoding.ids;
    batch.padding = Mask::filled({1, batch.seq}, false);
    const ForwardTrace trace = model.forward(batch);

    HiddenRecord r;
    r.sample_id = s.id;
    r.ids = batch.ids;
    r.padding.assign(batch.seq, 0);
    for (const Tensor& h : trace.hidden_states) {
      std::vector<float> layer(batch.seq * d);
      for (std::size_t i = 0; i < layer.size(); ++i) layer[i] = static_cast<float>(h[i]);
      r.states.push_back(std::move(layer));
    }
    dump.records.push_back(std::move(r));
  }
  return dump;
}

ForwardTrace trace_from_record(const HiddenRecord& record, const ModelConfig& model) {
  const std::size_t seq = record.ids.size();
  const std::size_t d = model.d_model;
  ForwardTrace trace;
  for (const auto& layer : record.states) {
    if (layer.size() != seq * d) throw Error("hidden record " + record.sample_id + ": state size mismatch");
    trace.hidden_states.emplace_back(Shape{1, seq, d}, std::vector<double>(layer.begin(), layer.end()));
  }
  trace.padding = Mask({1, seq}, record.padding);
  return trace;
}

}  // namespace mta
