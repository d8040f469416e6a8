#pragma once

// On-disk formats.
//
// Checkpoint:
//   "MFRL1\n"  "V <n>\n"  n lines, one vocab symbol each
//   (V+1)*V little-endian float64, trans row-major, then V*V for ctx.
//
// Trainer state (resume): "MFRS1\n", step and Adam counter as little-endian
// uint64, then four tables in checkpoint order: params, reference, first
// moment, second moment.

#include <cstdint>
#include <filesystem>
#include <string>

#include "mulferl/policy.hpp"
#include "mulferl/vocab.hpp"

namespace mulferl {

struct Checkpoint {
  Vocab vocab;
  PolicyParams params;
};

std::string encode_checkpoint(const Vocab& vocab, const PolicyParams& params);
/// Throws IoError on a malformed or truncated buffer.
Checkpoint decode_checkpoint(const std::string& bytes);

/// Write-then-rename; a reader never observes a partial file.
void save_checkpoint(const std::filesystem::path& path, const Vocab& vocab, const PolicyParams& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct TrainerState {
  std::uint64_t step = 0;       // number of completed steps
  std::uint64_t adam_t = 0;
  PolicyParams params;
  PolicyParams ref;
  Gradient m;
  Gradient v;
};

void save_trainer_state(const std::filesystem::path& path, const TrainerState& state);
TrainerState load_trainer_state(const std::filesystem::path& path);

/// Atomic whole-file write (temp file in the same directory, then rename).
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace mulferl
