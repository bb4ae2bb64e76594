#include "pbp/checkpoint.hpp"

#include <cstring>

#include "binary_io.hpp"
#include "json.hpp"
#include "pbp/errors.hpp"

namespace pbp::spg {

void write_checkpoint(const PromptModel& model, std::uint64_t step, const std::filesystem::path& path) {
  nlohmann::ordered_json header;
  header["d"] = model.dim();
  header["b"] = model.prompt_length();
  header["heads"] = model.heads();
  header["step"] = step;
  const std::string text = header.dump();

  std::string out;
  out.append(kCheckpointMagic, 4);
  io::put_u32(out, kCheckpointVersion);
  io::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  for (const auto& [name, t] : model.named_parameters()) {
    for (double v : t.values()) io::put_f32(out, static_cast<float>(v));
  }
  try {
    io::write_file(path, out);
  } catch (const IoError& e) {
    throw IoError(std::string("writing checkpoint: ") + e.what());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string context = path.string();
  const std::string bytes = io::read_file(path);
  io::Reader reader(bytes, context);
  const std::string magic = reader.raw(4, "magic");
  if (std::memcmp(magic.data(), kCheckpointMagic, 4) != 0) {
    throw LoadError("magic", context + ": bad magic bytes (not a PBCK checkpoint)");
  }
  const auto version = reader.u32("version");
  if (version != kCheckpointVersion) {
    throw LoadError("version", context + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto len = reader.u32("header length");
  const std::string text = reader.raw(len, "JSON header");
  std::size_t d = 0, b = 0, heads = 0;
  std::uint64_t step = 0;
  try {
    const auto j = nlohmann::json::parse(text);
    d = j.at("d").get<std::size_t>();
    b = j.at("b").get<std::size_t>();
    heads = j.at("heads").get<std::size_t>();
    step = j.at("step").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("header", context + ": malformed JSON header: " + e.what());
  }
  if (d == 0 || heads == 0 || d % heads != 0) {
    throw LoadError("header", context + ": inconsistent extents d=" + std::to_string(d) +
                                  " heads=" + std::to_string(heads));
  }

  Checkpoint ck{PromptModel::create(d, b, heads, 0), step};
  std::size_t total = 0;
  for (const auto& [name, t] : ck.model.named_parameters()) total += t.numel();
  if (reader.remaining() != 4 * total) {
    throw LoadError(reader.remaining() < 4 * total ? "truncated" : "trailing",
                    context + ": payload has " + std::to_string(reader.remaining()) +
                        " bytes, expected " + std::to_string(4 * total));
  }
  for (auto& [name, t] : ck.model.named_parameters()) {
    auto values = t.mutable_values();
    for (auto& v : values) v = static_cast<double>(reader.f32(name.c_str()));
  }
  return ck;
}

}  // namespace pbp::spg
