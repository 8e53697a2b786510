#pragma once

#include "settx/binary_io.hpp"
#include "settx/training.hpp"

#include <filesystem>
#include <iosfwd>

namespace settx {

// Layout, integers and floats little-endian:
//   "STFM" | u32 version | u64 config length | config text (sorted key = value)
//   | u64 tensor count | per tensor: u32 name length, name, u32 rank,
//     u64 dims[rank], f64 values (row-major)
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public io::FormatError {
 public:
  using io::FormatError::FormatError;
};

struct LoadedModel {
  TaskSpec spec;
  Model model;
};

void write_checkpoint(std::ostream& out, const TaskSpec& spec, const Model& model);
/// Rebuilds the model described by the embedded configuration. Nothing is
/// returned unless the whole file parsed.
LoadedModel read_checkpoint(std::istream& in);

/// Writes to a temporary sibling and renames, so an existing checkpoint is
/// never left half-written.
void save_checkpoint(const std::filesystem::path& path, const TaskSpec& spec, const Model& model);
LoadedModel load_checkpoint(const std::filesystem::path& path);

/// Loads into an existing model; rejects a checkpoint of another
/// architecture or task.
void load_checkpoint_into(const std::filesystem::path& path, const TaskSpec& spec, Model& model);

}  // namespace settx
