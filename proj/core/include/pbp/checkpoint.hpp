#pragma once

// Prompt-model checkpoint:
//
//   "PBCK" · version u32 · header_length u32 · JSON {"d","b","heads","step"}
//   · f32 arrays in PromptModel::named_parameters() order, no padding.

#include <cstdint>
#include <filesystem>

#include "pbp/spg.hpp"

namespace pbp::spg {

inline constexpr char kCheckpointMagic[4] = {'P', 'B', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  PromptModel model;
  std::uint64_t step = 0;
};

void write_checkpoint(const PromptModel& model, std::uint64_t step, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace pbp::spg
