#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "tsn/trainer.hpp"

namespace tsn::trainer {

static_assert(std::endian::native == std::endian::little, "checkpoint payload is stored little-endian");

namespace {

constexpr char kMagic[8] = {'T', 'S', 'N', 'C', 'K', 'P', 'T', '1'};
constexpr char kTrailer[8] = {'T', 'S', 'N', 'E', 'N', 'D', '0', '1'};

nlohmann::json shape_json(const Shape& s) { return nlohmann::json::array({s.n, s.c, s.h, s.w}); }

Shape json_shape(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw CheckpointError("checkpoint: malformed shape entry");
  return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
}

// Names the first difference between two manifests.
void compare_manifests(const model::ShapeManifest& stored, const model::ShapeManifest& expected) {
  for (const auto& [name, shape] : expected) {
    const auto it = stored.find(name);
    if (it == stored.end()) throw CheckpointError("checkpoint manifest mismatch: missing parameter '" + name + "'");
    if (!(it->second == shape)) {
      throw CheckpointError("checkpoint manifest mismatch: parameter '" + name + "' has shape " + it->second.str() +
                            ", expected " + shape.str());
    }
  }
  for (const auto& [name, shape] : stored) {
    if (!expected.count(name)) throw CheckpointError("checkpoint manifest mismatch: unexpected parameter '" + name + "'");
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const model::ModelState& state, const model::ModelConfig& cfg) {
  nlohmann::ordered_json header;
  header["model"] = nlohmann::ordered_json::parse(nlohmann::json(cfg).dump());
  auto entries = nlohmann::ordered_json::array();
  for (const auto& [name, var] : state.params) {
    entries.push_back({{"name", name}, {"kind", "param"}, {"shape", shape_json(var->value.shape())}});
  }
  for (const auto& [name, t] : state.buffers) {
    entries.push_back({{"name", name}, {"kind", "buffer"}, {"shape", shape_json(t.shape())}});
  }
  header["manifest"] = entries;
  const std::string text = header.dump();

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(kMagic, sizeof kMagic);
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    const auto put = [&](const Tensor& t) {
      out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    };
    for (const auto& [name, var] : state.params) put(var->value);
    for (const auto& [name, t] : state.buffers) put(t);
    out.write(kTrailer, sizeof kTrailer);
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto fail = [&](const std::string& why) { throw CheckpointError("checkpoint " + path.string() + ": " + why); };

  std::size_t pos = 0;
  if (bytes.size() < sizeof kMagic + 8 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) fail("bad magic");
  pos += sizeof kMagic;
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + pos, sizeof len);
  pos += sizeof len;
  if (len > bytes.size() - pos) fail("truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(pos, len));
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("unreadable header: ") + e.what());
  }
  pos += len;

  Checkpoint ck;
  try {
    ck.config = header.at("model").get<model::ModelConfig>();
  } catch (const std::exception& e) {
    fail(std::string("invalid model config: ") + e.what());
  }
  model::ShapeManifest stored;
  std::vector<std::tuple<std::string, bool, Shape>> order;
  for (const auto& e : header.at("manifest")) {
    const auto name = e.at("name").get<std::string>();
    const Shape s = json_shape(e.at("shape"));
    stored[name] = s;
    order.emplace_back(name, e.at("kind").get<std::string>() == "param", s);
  }
  std::size_t payload = 0;
  for (const auto& [name, is_param, s] : order) payload += s.numel() * sizeof(double);
  if (bytes.size() != pos + payload + sizeof kTrailer) fail("truncated or oversized payload");
  if (std::memcmp(bytes.data() + pos + payload, kTrailer, sizeof kTrailer) != 0) fail("bad trailer");

  compare_manifests(stored, model::expected_manifest(ck.config));

  for (const auto& [name, is_param, s] : order) {
    Tensor t(s);
    std::memcpy(t.data(), bytes.data() + pos, s.numel() * sizeof(double));
    pos += s.numel() * sizeof(double);
    if (is_param) {
      ck.state.params[name] = ag::parameter(std::move(t));
    } else {
      ck.state.buffers[name] = std::move(t);
    }
  }
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const model::ModelConfig& expected) {
  Checkpoint ck = load_checkpoint(path);
  compare_manifests(ck.state.manifest(), model::expected_manifest(expected));
  return ck;
}

}  // namespace tsn::trainer
