#pragma once
// Versioned parameter container.
//
// Layout: "SBCKPT" magic, u32 version, u64 header length, JSON header
// (kind, config, tensor names and shapes), then every tensor's values as
// little-endian f64 in header order.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sparsebridge/tensor.hpp"

namespace sparsebridge {

struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    std::string kind; // "denoiser", "control_branch", "encoder"
    nlohmann::json config;
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor &tensor(const std::string &name) const;
};

void save_checkpoint(const Checkpoint &ckpt, const std::filesystem::path &path);
Checkpoint load_checkpoint(const std::filesystem::path &path);

std::string encode_checkpoint(const Checkpoint &ckpt);
Checkpoint decode_checkpoint(const std::string &bytes);

} // namespace sparsebridge
