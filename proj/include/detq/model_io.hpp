#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "detq/quantizer.hpp"
#include "detq/tensor.hpp"

namespace detq {

// Serialized quantizer attachment. `site` is "weight:<conv>" or "act:<site>".
// Baked weight quantizers describe values already folded into the stored
// tensor; runtime quantizers are re-applied on load.
struct QuantizerRecord {
  std::string site;
  AffineQuantizer q;
  bool baked = false;
};

// Single-file model container: manifest (JSON) + little-endian f32 blob.
// load(save(m)) reproduces every tensor bit-exactly at f32 precision.
struct ModelContainer {
  nlohmann::json arch;
  std::map<std::string, Tensor> tensors;  // name -> values (ordered)
  std::vector<QuantizerRecord> quantizers;
};

void save_model(const ModelContainer& m, const std::string& path);
ModelContainer load_model(const std::string& path);

}  // namespace detq
