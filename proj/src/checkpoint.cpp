#include "settx/checkpoint.hpp"

#include <fstream>
#include <ostream>

namespace settx {

namespace {

constexpr std::uint64_t kMaxConfigBytes = 1 << 20;
constexpr std::uint64_t kMaxTensorValues = 1ULL << 32;

}  // namespace

void write_checkpoint(std::ostream& out, const TaskSpec& spec, const Model& model) {
  const std::string config = spec.to_kv().to_text();
  io::write_bytes(out, "STFM");
  io::write_le<std::uint32_t>(out, kCheckpointVersion);
  io::write_le<std::uint64_t>(out, config.size());
  io::write_bytes(out, config);
  const auto& params = model.parameters();
  io::write_le<std::uint64_t>(out, params.size());
  for (const Parameter& p : params) {
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    io::write_bytes(out, p.name);
    io::write_le<std::uint32_t>(out, 2);
    io::write_le<std::uint64_t>(out, static_cast<std::uint64_t>(p.value.rows()));
    io::write_le<std::uint64_t>(out, static_cast<std::uint64_t>(p.value.cols()));
    for (Index i = 0; i < p.value.size(); ++i) io::write_le(out, p.value.data()[i]);
  }
  if (!out) throw CheckpointError("checkpoint write failed");
}

LoadedModel read_checkpoint(std::istream& in) {
  try {
    if (io::read_bytes(in, 4, "magic") != "STFM") throw CheckpointError("not a checkpoint (bad magic)");
    const auto version = io::read_le<std::uint32_t>(in, "version");
    if (version != kCheckpointVersion) {
      throw CheckpointError("unsupported checkpoint version " + std::to_string(version) +
                            " (expected " + std::to_string(kCheckpointVersion) + ")");
    }
    const auto config_len = io::read_le<std::uint64_t>(in, "config length");
    if (config_len > kMaxConfigBytes) throw CheckpointError("implausible config length");
    const std::string config = io::read_bytes(in, config_len, "config");
    TaskSpec spec;
    try {
      spec = TaskSpec::from(KeyValues::parse(config));
    } catch (const ConfigError& e) {
      throw CheckpointError(std::string("embedded configuration invalid: ") + e.what());
    }
    Rng unused(0);
    LoadedModel loaded{spec, Model(spec.model, unused)};

    const auto count = io::read_le<std::uint64_t>(in, "tensor count");
    const auto params = loaded.model.parameters().pointers();
    if (count != params.size()) {
      throw CheckpointError("checkpoint has " + std::to_string(count) + " tensors, model expects " +
                            std::to_string(params.size()));
    }
    for (Parameter* p : params) {
      const auto name_len = io::read_le<std::uint32_t>(in, "tensor name length");
      if (name_len > 4096) throw CheckpointError("implausible tensor name length");
      const std::string name = io::read_bytes(in, name_len, "tensor name");
      if (name != p->name) {
        throw CheckpointError("tensor '" + name + "' found where '" + p->name + "' was expected");
      }
      const auto rank = io::read_le<std::uint32_t>(in, "tensor rank");
      if (rank != 2) throw CheckpointError("tensor '" + name + "' has rank " + std::to_string(rank));
      const auto rows = io::read_le<std::uint64_t>(in, "tensor dims");
      const auto cols = io::read_le<std::uint64_t>(in, "tensor dims");
      if (rows != static_cast<std::uint64_t>(p->value.rows()) ||
          cols != static_cast<std::uint64_t>(p->value.cols()) || rows * cols > kMaxTensorValues) {
        throw CheckpointError("tensor '" + name + "' is " + std::to_string(rows) + "x" +
                              std::to_string(cols) + ", model expects " + shape_str(p->value));
      }
      for (Index i = 0; i < p->value.size(); ++i) {
        p->value.data()[i] = io::read_le<double>(in, "tensor values");
      }
    }
    if (in.peek() != std::char_traits<char>::eof()) {
      throw CheckpointError("trailing bytes after tensor table");
    }
    return loaded;
  } catch (const CheckpointError&) {
    throw;
  } catch (const io::FormatError& e) {
    throw CheckpointError(e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const TaskSpec& spec, const Model& model) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    write_checkpoint(out, spec, model);
    out.close();
    if (!out) throw CheckpointError("cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

LoadedModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read " + path.string());
  return read_checkpoint(in);
}

void load_checkpoint_into(const std::filesystem::path& path, const TaskSpec& spec, Model& model) {
  LoadedModel loaded = load_checkpoint(path);
  if (!(loaded.spec == spec)) {
    throw CheckpointError("checkpoint architecture or task differs from the target model");
  }
  auto dst = model.parameters().pointers();
  auto src = loaded.model.parameters().pointers();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i]->value = src[i]->value;
}

}  // namespace settx
