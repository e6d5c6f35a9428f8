#pragma once

#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "cloudcast/tensor.hpp"

namespace cloudcast {

struct NamedParam {
    std::string name;
    Tensor tensor;
};

// Ordered list; the order is the registration order of the owning model and
// doubles as the optimizer slot order.
using ParamList = std::vector<NamedParam>;

// Binary container: 8-byte magic "CCKPT\1\r\n", u64 little-endian header
// length, UTF-8 JSON header, then all values as little-endian IEEE-754
// doubles back to back. The header lists one record per tensor with its
// name, shape and element offset. Round-trips are bit-exact.
void save_checkpoint(const std::string& path, const ParamList& params,
                     const nlohmann::json& meta);

ParamList load_checkpoint(const std::string& path, nlohmann::json* meta_out = nullptr);

// Copies values from a loaded list into live model parameters; names and
// shapes must match one to one, in order.
void assign_parameters(ParamList& dst, const ParamList& src);

}  // namespace cloudcast
