#pragma once

// Frozen stand-in for a pre-trained vision-language model.
//
// Images live in a latent space; each class has a generative center, a few
// "modes" (distinct visual attributes) and a dataset-wide shift. Patches are
// latent points pushed through a frozen orthogonal image projection and
// unit-normalized. The text side mean-pools prompt tokens, applies a frozen
// linear map aligned with that projection, squashes with tanh and
// unit-normalizes, so a bare label embedding already lands near its class.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "pbp/bundle.hpp"
#include "pbp/diff.hpp"

namespace pbp::vlp {

struct VlpConfig {
  std::uint64_t seed = 0;
  std::size_t d = 64;
  std::size_t m = 16;   // patches per image
  std::size_t b = 4;    // prompt prefix length; text input is b+1 tokens
  std::size_t num_classes = 8;
  std::size_t modes = 3;
  double noise_scale = 0.3;          // per-coordinate patch noise
  double class_similarity = 0.5;     // cosine between class centers
  double mode_scale = 1.0;
  double shift_scale = 2.0;          // dataset-wide offset absent from label embeddings
  double label_noise = 1.5;          // label embedding = center + label_noise · random unit
  double text_alignment = 1.0;       // weight of the image projection inside the text map
  double text_distortion = 0.3;      // random part of the text map
  double text_gain = 1.5;
  std::size_t background_period = 4; // every k-th patch is background (0 disables)
};

struct ImageEncoding {
  std::vector<double> global;   // d
  std::vector<double> patches;  // m × d, row-major
};

class SyntheticVlp {
 public:
  explicit SyntheticVlp(VlpConfig config);

  const VlpConfig& config() const noexcept { return config_; }
  std::size_t dim() const noexcept { return config_.d; }

  ImageEncoding encode_image(std::size_t class_id, std::size_t mode_id,
                             std::uint64_t noise_seed) const;

  // Unit-norm frozen label embedding e_c.
  std::vector<double> class_embedding(std::size_t class_id) const;

  // prompt_tokens: (b+1)×d. Differentiable in the tokens only.
  diff::Tensor encode_text(const diff::Tensor& prompt_tokens) const;

  const diff::Tensor& image_projection() const noexcept { return image_projection_; }
  const diff::Tensor& text_projection() const noexcept { return text_projection_; }

  // Latent-space generative quantities, exposed for diagnostics and tests.
  std::vector<double> class_center(std::size_t class_id) const;
  std::vector<double> mode_offset(std::size_t class_id, std::size_t mode_id) const;

 private:
  void check_class(std::size_t class_id) const;

  VlpConfig config_;
  diff::Tensor image_projection_;  // d×d orthogonal, row-vector convention x·P
  diff::Tensor text_projection_;   // d×d
  std::vector<double> common_;
  std::vector<double> shift_;
  std::vector<double> background_;
};

struct SyntheticSplit {
  EmbeddingBundle train;
  EmbeddingBundle test;
};

// Few-shot dataset over all num_classes classes: `shots` training and
// `test_shots` held-out images per class, ordered by class then shot, with
// shot k drawn from mode k mod modes.
SyntheticSplit make_synthetic_dataset(const SyntheticVlp& vlp, std::size_t shots, std::size_t test_shots);

}  // namespace pbp::vlp
