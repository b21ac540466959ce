#include "twins/workbench/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <vector>

#include "json.hpp"

namespace twins::workbench {

namespace {

using nlohmann::json;

template <typename Scalar>
constexpr const char* dtype_name() {
  return sizeof(Scalar) == 4 ? "f32" : "f64";
}

template <typename Scalar>
void append_le(std::vector<char>& payload, const Tensor<Scalar>& t) {
  const std::size_t start = payload.size();
  payload.resize(start + sizeof(Scalar) * std::size_t(t.size()));
  std::memcpy(payload.data() + start, t.raw(), sizeof(Scalar) * std::size_t(t.size()));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = start; i < payload.size(); i += sizeof(Scalar))
      std::reverse(payload.begin() + std::ptrdiff_t(i), payload.begin() + std::ptrdiff_t(i + sizeof(Scalar)));
  }
}

template <typename Scalar>
Tensor<Scalar> vector_tensor(const typename Tensor<Scalar>::Vector& v) {
  return Tensor<Scalar>({v.size()}, v);
}

std::string stat_name(int block, const char* which) { return "bn" + std::to_string(block + 1) + "." + which; }

constexpr const char* kStatNames[] = {"running_mean", "running_var", "frozen_mean", "frozen_var"};

template <typename Scalar>
typename Tensor<Scalar>::Vector& stat_ref(BnLayerState<Scalar>& s, int which) {
  switch (which) {
    case 0: return s.running_mean;
    case 1: return s.running_var;
    case 2: return s.frozen_mean;
    default: return s.frozen_var;
  }
}

}  // namespace

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const Model<Scalar>& model, const CheckpointMetadata& meta) {
  std::vector<std::pair<std::string, Tensor<Scalar>>> records(model.params.begin(), model.params.end());
  for (int l = 0; l < kBlocks; ++l) {
    auto state = model.bn[std::size_t(l)];
    for (int k = 0; k < 4; ++k) records.emplace_back(stat_name(l, kStatNames[k]), vector_tensor<Scalar>(stat_ref(state, k)));
  }

  std::vector<char> payload;
  json tensors = json::array();
  for (const auto& [name, t] : records) {
    const std::size_t offset = payload.size();
    append_le(payload, t);
    tensors.push_back({{"name", name},
                       {"shape", t.shape()},
                       {"dtype", dtype_name<Scalar>()},
                       {"offset", offset},
                       {"length", payload.size() - offset}});
  }
  const auto& c = model.config;
  json bn = json::array();
  for (const auto& s : model.bn) bn.push_back({{"eps", double(s.eps)}, {"momentum", double(s.momentum)}});
  const json header = {
      {"version", kCheckpointVersion},
      {"metadata",
       {{"architecture",
         {{"channels", c.channels},
          {"height", c.height},
          {"width", c.width},
          {"widths", c.widths},
          {"target_classes", c.target_classes},
          {"source_classes", c.source_classes}}},
        {"bn", bn},
        {"method", meta.method},
        {"stage", meta.stage},
        {"seed", meta.seed},
        {"epoch", meta.epoch}}},
      {"tensors", tensors}};
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError(CheckpointError::Kind::Io, "cannot write " + path.string());
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const auto len = static_cast<std::uint32_t>(text.size());
  const char len_le[4] = {char(len), char(len >> 8), char(len >> 16), char(len >> 24)};
  out.write(len_le, 4);
  out.write(text.data(), std::streamsize(text.size()));
  out.write(payload.data(), std::streamsize(payload.size()));
  if (!out) throw CheckpointError(CheckpointError::Kind::Io, "write failed for " + path.string());
}

template <typename Scalar>
LoadedCheckpoint<Scalar> load_checkpoint(const std::filesystem::path& path) {
  using Kind = CheckpointError::Kind;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(Kind::Io, "cannot open " + path.string());
  const std::vector<char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};

  if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw CheckpointError(Kind::BadMagic, path.string() + ": not a TWINSCKP checkpoint");
  }
  const auto* u = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t header_len = std::size_t(u[8]) | std::size_t(u[9]) << 8 | std::size_t(u[10]) << 16 |
                                 std::size_t(u[11]) << 24;
  if (bytes.size() < 12 + header_len) throw CheckpointError(Kind::OutOfBounds, path.string() + ": header truncated");

  json header;
  try {
    header = json::parse(bytes.begin() + 12, bytes.begin() + 12 + std::ptrdiff_t(header_len));
  } catch (const json::exception& e) {
    throw CheckpointError(Kind::BadHeader, path.string() + ": malformed header: " + e.what());
  }
  if (!header.is_object() || !header.contains("version") || header["version"] != kCheckpointVersion) {
    throw CheckpointError(Kind::BadVersion, path.string() + ": unsupported checkpoint version");
  }
  const char* payload = bytes.data() + 12 + header_len;
  const std::size_t payload_size = bytes.size() - 12 - header_len;

  LoadedCheckpoint<Scalar> out;
  std::map<std::string, Tensor<Scalar>> tensors;
  try {
    const auto& m = header.at("metadata");
    const auto& a = m.at("architecture");
    auto& c = out.model.config;
    c.channels = a.at("channels");
    c.height = a.at("height");
    c.width = a.at("width");
    c.widths = a.at("widths").get<std::array<Index, 2>>();
    c.target_classes = a.at("target_classes");
    c.source_classes = a.at("source_classes");
    for (int l = 0; l < kBlocks; ++l) {
      out.model.bn[std::size_t(l)].eps = Scalar(m.at("bn").at(std::size_t(l)).at("eps").get<double>());
      out.model.bn[std::size_t(l)].momentum = Scalar(m.at("bn").at(std::size_t(l)).at("momentum").get<double>());
    }
    out.metadata.method = m.at("method");
    out.metadata.stage = m.at("stage");
    out.metadata.seed = m.at("seed");
    out.metadata.epoch = m.at("epoch");

    for (const auto& rec : header.at("tensors")) {
      const std::string name = rec.at("name");
      const auto shape = rec.at("shape").get<Shape>();
      const std::size_t offset = rec.at("offset"), length = rec.at("length");
      if (rec.at("dtype") != dtype_name<Scalar>()) {
        throw CheckpointError(Kind::DtypeMismatch, "tensor '" + name + "' has dtype " + rec.at("dtype").dump());
      }
      if (offset > payload_size || length > payload_size - offset) {
        throw CheckpointError(Kind::OutOfBounds, "tensor '" + name + "' lies outside the payload");
      }
      Tensor<Scalar> t(shape);
      if (length != sizeof(Scalar) * std::size_t(t.size())) {
        throw CheckpointError(Kind::BadHeader, "tensor '" + name + "' length does not match its shape");
      }
      std::memcpy(t.raw(), payload + offset, length);
      if constexpr (std::endian::native == std::endian::big) {
        auto* raw = reinterpret_cast<char*>(t.raw());
        for (std::size_t i = 0; i < length; i += sizeof(Scalar)) std::reverse(raw + i, raw + i + sizeof(Scalar));
      }
      tensors.insert_or_assign(name, std::move(t));
    }
  } catch (const json::exception& e) {
    throw CheckpointError(Kind::BadHeader, path.string() + ": malformed header: " + e.what());
  } catch (const InvalidArgument& e) {
    throw CheckpointError(Kind::BadHeader, path.string() + ": " + e.what());
  }

  auto take = [&](const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw CheckpointError(Kind::MissingTensor, "checkpoint lacks tensor '" + name + "'");
    auto t = std::move(it->second);
    tensors.erase(it);
    return t;
  };
  for (int l = 0; l < kBlocks; ++l) {
    for (int k = 0; k < 4; ++k) stat_ref(out.model.bn[std::size_t(l)], k) = take(stat_name(l, kStatNames[k])).data();
  }
  out.model.params = std::move(tensors);
  for (const auto& required : {names::conv(0), names::conv(1), names::head_weight(Head::Target)}) {
    if (!out.model.params.count(required)) {
      throw CheckpointError(Kind::MissingTensor, "checkpoint lacks tensor '" + required + "'");
    }
  }
  return out;
}

template void save_checkpoint<float>(const std::filesystem::path&, const Model<float>&, const CheckpointMetadata&);
template void save_checkpoint<double>(const std::filesystem::path&, const Model<double>&, const CheckpointMetadata&);
template LoadedCheckpoint<float> load_checkpoint<float>(const std::filesystem::path&);
template LoadedCheckpoint<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace twins::workbench
