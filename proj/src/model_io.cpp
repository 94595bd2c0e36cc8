#include "detq/model_io.hpp"

#include <cstring>
#include <fstream>

using nlohmann::json;

namespace detq {

namespace {

constexpr char kMagic[8] = {'D', 'E', 'T', 'Q', 'M', 'D', 'L', '\n'};
constexpr uint32_t kModelFormatVersion = 1;

json quantizer_to_json(const QuantizerRecord& r) {
  return json{{"site", r.site},
              {"granularity",
               r.q.granularity == Granularity::kPerTensor ? "per_tensor" : "per_channel"},
              {"bits", r.q.bits},
              {"signed", r.q.is_signed},
              {"s", r.q.scale},
              {"z", r.q.zero_point},
              {"baked", r.baked}};
}

QuantizerRecord quantizer_from_json(const json& j) {
  QuantizerRecord r;
  r.site = j.at("site").get<std::string>();
  std::string g = j.at("granularity").get<std::string>();
  DETQ_CHECK(g == "per_tensor" || g == "per_channel", "unknown quantizer granularity " << g);
  r.q.granularity = g == "per_tensor" ? Granularity::kPerTensor : Granularity::kPerChannel;
  r.q.bits = j.at("bits").get<int>();
  r.q.is_signed = j.at("signed").get<bool>();
  r.q.scale = j.at("s").get<std::vector<double>>();
  r.q.zero_point = j.at("z").get<std::vector<int64_t>>();
  r.baked = j.at("baked").get<bool>();
  r.q.validate();
  return r;
}

}  // namespace

void save_model(const ModelContainer& m, const std::string& path) {
  json manifest;
  manifest["format_version"] = kModelFormatVersion;
  manifest["arch"] = m.arch;
  json tensors = json::array();
  int64_t offset = 0;
  for (const auto& [name, t] : m.tensors) {
    tensors.push_back({{"name", name},
                       {"shape", t.shape()},
                       {"offset", offset},
                       {"dtype", "f32"}});
    offset += t.numel() * 4;
  }
  manifest["tensors"] = tensors;
  json qs = json::array();
  for (const auto& r : m.quantizers) qs.push_back(quantizer_to_json(r));
  manifest["quantizers"] = qs;

  std::string mstr = manifest.dump();
  std::ofstream f(path, std::ios::binary);
  DETQ_CHECK(f.good(), "cannot open " << path << " for writing");
  f.write(kMagic, sizeof kMagic);
  uint64_t mlen = mstr.size();
  f.write(reinterpret_cast<const char*>(&mlen), sizeof mlen);
  f.write(mstr.data(), std::streamsize(mstr.size()));
  for (const auto& [name, t] : m.tensors) {
    std::vector<float> buf(size_t(t.numel()));
    for (int64_t i = 0; i < t.numel(); ++i) buf[size_t(i)] = float(t.data()[i]);
    f.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size() * 4));
  }
  DETQ_CHECK(f.good(), "write failed for " << path);
}

ModelContainer load_model(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  DETQ_CHECK(f.good(), "cannot open model file " << path);
  char magic[8];
  f.read(magic, sizeof magic);
  DETQ_CHECK(f.gcount() == sizeof magic && std::memcmp(magic, kMagic, sizeof magic) == 0,
             path << ": not a model container");
  uint64_t mlen = 0;
  f.read(reinterpret_cast<char*>(&mlen), sizeof mlen);
  DETQ_CHECK(f.gcount() == sizeof mlen && mlen > 0 && mlen < (1ull << 30),
             path << ": corrupt manifest length");
  std::string mstr(mlen, '\0');
  f.read(mstr.data(), std::streamsize(mlen));
  DETQ_CHECK(uint64_t(f.gcount()) == mlen, path << ": truncated manifest");
  json manifest = json::parse(mstr, nullptr, false);
  DETQ_CHECK(!manifest.is_discarded(), path << ": manifest is not valid JSON");
  DETQ_CHECK(manifest.value("format_version", 0u) == kModelFormatVersion,
             path << ": unsupported model format version "
                  << manifest.value("format_version", 0u));

  std::vector<char> blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  ModelContainer m;
  m.arch = manifest.value("arch", json::object());
  for (const auto& jt : manifest.at("tensors")) {
    std::string name = jt.at("name").get<std::string>();
    Shape shape = jt.at("shape").get<Shape>();
    int64_t offset = jt.at("offset").get<int64_t>();
    DETQ_CHECK(jt.at("dtype").get<std::string>() == "f32", path << ": unsupported dtype");
    int64_t count = shape_numel(shape);
    DETQ_CHECK(offset >= 0 && offset + count * 4 <= int64_t(blob.size()),
               path << ": tensor '" << name << "' byte range [" << offset << ", "
                    << offset + count * 4 << ") outside blob of " << blob.size() << " bytes");
    std::vector<double> data(static_cast<size_t>(count));
    const float* src = reinterpret_cast<const float*>(blob.data() + offset);
    for (int64_t i = 0; i < count; ++i) data[size_t(i)] = double(src[i]);
    m.tensors.emplace(name, Tensor::from_data(shape, std::move(data)));
  }
  for (const auto& jq : manifest.at("quantizers")) m.quantizers.push_back(quantizer_from_json(jq));
  return m;
}

}  // namespace detq
