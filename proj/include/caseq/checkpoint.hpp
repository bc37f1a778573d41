#pragma once

// Checkpoint container:
//
//   caseq-checkpoint <format version>\n
//   config <model config JSON, one line>\n
//   tensors <count>\n
//   then per tensor in canonical order:
//   <name> <rows> <cols>\n<rows*cols little-endian float64, row-major>\n
//
// Saving a loaded checkpoint reproduces the original bytes.

#include "caseq/model.hpp"

#include <filesystem>
#include <iosfwd>

namespace caseq {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  CaseqConfig config;
  CaseqParams params;
};

void save_checkpoint(std::ostream& out, const CaseqConfig& config, const CaseqParams& params);
void save_checkpoint(const std::filesystem::path& path, const CaseqConfig& config,
                     const CaseqParams& params);
Checkpoint load_checkpoint(std::istream& in);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace caseq
