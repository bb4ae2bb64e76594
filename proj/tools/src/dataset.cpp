#include "pbp/cli/dataset.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"
#include "pbp/errors.hpp"
#include "pbp/plan_export.hpp"

namespace pbp::cli {

namespace {

using json = nlohmann::ordered_json;

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

vlp::VlpConfig SyntheticSpec::vlp_config() const {
  vlp::VlpConfig c;
  c.seed = seed;
  c.num_classes = classes;
  c.modes = modes;
  if (noise) c.noise_scale = *noise;
  return c;
}

void SyntheticSpec::validate() const {
  if (classes < 1) throw ParameterError("classes must be at least 1");
  if (modes < 1) throw ParameterError("modes must be at least 1");
  if (shots < 1) throw ParameterError("shots must be at least 1");
  if (noise && !(*noise >= 0.0)) throw ParameterError("noise must be nonnegative");
}

std::string vlp_config_json(const vlp::VlpConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["d"] = c.d;
  j["m"] = c.m;
  j["b"] = c.b;
  j["num_classes"] = c.num_classes;
  j["modes"] = c.modes;
  j["noise_scale"] = c.noise_scale;
  j["class_similarity"] = c.class_similarity;
  j["mode_scale"] = c.mode_scale;
  j["shift_scale"] = c.shift_scale;
  j["label_noise"] = c.label_noise;
  j["text_alignment"] = c.text_alignment;
  j["text_distortion"] = c.text_distortion;
  j["text_gain"] = c.text_gain;
  j["background_period"] = c.background_period;
  return j.dump(2);
}

vlp::VlpConfig parse_vlp_config(const std::string& text) {
  vlp::VlpConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    c.seed = j.at("seed").get<std::uint64_t>();
    c.d = j.at("d").get<std::size_t>();
    c.m = j.at("m").get<std::size_t>();
    c.b = j.at("b").get<std::size_t>();
    c.num_classes = j.at("num_classes").get<std::size_t>();
    c.modes = j.at("modes").get<std::size_t>();
    c.noise_scale = j.at("noise_scale").get<double>();
    c.class_similarity = j.at("class_similarity").get<double>();
    c.mode_scale = j.at("mode_scale").get<double>();
    c.shift_scale = j.at("shift_scale").get<double>();
    c.label_noise = j.at("label_noise").get<double>();
    c.text_alignment = j.at("text_alignment").get<double>();
    c.text_distortion = j.at("text_distortion").get<double>();
    c.text_gain = j.at("text_gain").get<double>();
    c.background_period = j.at("background_period").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("header", std::string("malformed encoder config: ") + e.what());
  }
  return c;
}

DatasetFiles write_dataset(const SyntheticSpec& spec, const fs::path& dir) {
  spec.validate();
  const auto cfg = spec.vlp_config();
  const vlp::SyntheticVlp encoder(cfg);
  const auto split = vlp::make_synthetic_dataset(encoder, spec.shots, spec.test_shots);

  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  DatasetFiles files{dir / "train.pbeb", dir / "test.pbeb", dir / kSidecarName};
  vlp::write_bundle(split.train, files.train);
  if (!split.test.images.empty()) vlp::write_bundle(split.test, files.test);

  json j;
  j["classes"] = spec.classes;
  j["modes"] = spec.modes;
  j["shots"] = spec.shots;
  j["test_shots"] = spec.test_shots;
  j["seed"] = spec.seed;
  j["train"] = files.train.filename().string();
  j["test"] = split.test.images.empty() ? json(nullptr) : json(files.test.filename().string());
  j["encoder"] = json::parse(vlp_config_json(cfg));
  ct::write_text(files.sidecar, j.dump(2) + "\n");
  return files;
}

Dataset open_dataset(const fs::path& bundle_path) {
  Dataset ds{vlp::load_bundle(bundle_path), std::nullopt, std::nullopt};
  const auto sidecar = bundle_path.parent_path() / kSidecarName;
  if (!fs::exists(sidecar)) return ds;

  nlohmann::json j;
  try {
    j = nlohmann::json::parse(slurp(sidecar));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("header", sidecar.string() + ": " + e.what());
  }
  if (!j.contains("encoder")) throw LoadError("header", sidecar.string() + " has no encoder section");
  ds.encoder = parse_vlp_config(j["encoder"].dump());
  if (ds.encoder->d != ds.bundle.d || ds.encoder->m != ds.bundle.m || ds.encoder->num_classes != ds.bundle.c) {
    throw LoadError("validation", "bundle " + bundle_path.string() + " does not match " + sidecar.string());
  }
  if (j.contains("test") && j["test"].is_string()) {
    const auto test = bundle_path.parent_path() / j["test"].get<std::string>();
    if (fs::absolute(test).lexically_normal() != fs::absolute(bundle_path).lexically_normal()) ds.test = test;
  }
  return ds;
}

}  // namespace pbp::cli
