#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "psinet/architecture.hpp"
#include "psinet/dataset.hpp"
#include "psinet/model_params.hpp"

namespace psinet {

inline constexpr std::uint16_t kCheckpointVersion = 1;

/// Named tensors in container order.
using TensorEntries = std::vector<std::pair<std::string, Tensor>>;

/// Container layout (all integers little-endian):
///   "PSNF" | u16 version | u32 count |
///   count x ( u16 name length | name bytes | u8 dtype (0 = f32) | u8 rank |
///             rank x u32 dim | payload f32 LE )
std::vector<std::uint8_t> encode_container(const TensorEntries& entries);
/// Throws FormatError carrying the byte offset of the first bad field.
TensorEntries decode_container(std::span<const std::uint8_t> bytes);

/// Params plus a "meta/fingerprint" entry (four 16-bit chunks stored as f32).
std::vector<std::uint8_t> encode_params(const ModelParams& params);
ModelParams decode_params(std::span<const std::uint8_t> bytes);

/// Bytes the container encoding of exactly these tensors occupies (no meta
/// entry); used for communication accounting.
std::size_t serialized_size(const ModelParams& params);

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& path);

/// Loads a checkpoint for `spec`. Besides exact matches it accepts parameters
/// of the same network stored under the other partition label when `spec`
/// has a single structure group ("shared/x" <-> "group0/x"), e.g. a FedAvg
/// checkpoint loaded into a G = 1 Psi-Net.
ModelParams load_checkpoint_for(const std::filesystem::path& path, const ArchitectureSpec& spec);
ModelParams adapt_params(const ArchitectureSpec& spec, const ModelParams& params);

void save_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& path);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace psinet
