#pragma once

// Dual-branch (spatial + spectral) transformer encoder whose attention heads
// carry a coalescent projection: a D'×D' matrix C inserted between query and
// key, softmax(Q·C·Kᵀ/√D')·V. With the backbone frozen, the C matrices and the
// spectral-enhancement fusion maps are the only trainable parameters.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mifomo/rng.hpp"
#include "mifomo/tensor.hpp"

namespace mifomo {

struct EncoderConfig {
  std::size_t depth = 2;
  std::size_t embed_dim = 32;
  std::size_t heads = 4;
  std::size_t mlp_dim = 64;
  std::size_t patch_size = 3;
  std::size_t spectral_tokens = 8;
  std::size_t bands = 50;
  /// Spatial window is (2r+1)×(2r+1).
  std::size_t patch_radius = 4;
  double ln_eps = 1e-6;

  std::size_t head_dim() const { return embed_dim / heads; }
  std::size_t window() const { return 2 * patch_radius + 1; }
  std::size_t spatial_tokens() const {
    const std::size_t side = window() / patch_size;
    return side * side;
  }
  /// Reduced channel width of the fusion module.
  std::size_t fusion_dim() const { return embed_dim / 2; }
  /// Spectral layers that feed the fusion module.
  std::size_t spectral_depth_used() const { return depth < 4 ? depth : 4; }

  /// Throws ConfigError naming the offending key.
  void validate() const;
};

enum class ParamRole { Backbone, Projection, Fusion };

enum class TrainPhase {
  /// Everything trainable: the stand-in for foundation-model pretraining.
  Warmup,
  /// Backbone frozen; CP matrices and fusion maps train.
  Adaptation,
};

struct AttentionHead {
  Tensor w_q;  // D × D'
  Tensor w_k;  // D × D'
  Tensor w_v;  // D × D'
  Tensor cp;   // D' × D', the coalescent projection
};

struct TransformerBlock {
  Tensor ln1_gain, ln1_bias;
  std::vector<AttentionHead> heads;
  Tensor w_out;  // h·D' × D
  Tensor ln2_gain, ln2_bias;
  Tensor ff1_w, ff1_b, ff2_w, ff2_b;
};

struct Branch {
  Tensor embed_w, embed_b;
  Tensor pos;  // tokens × D
  std::vector<TransformerBlock> blocks;
  Tensor lnf_gain, lnf_bias;
};

/// Spectral enhancement: both branch outputs are reduced to D/2 channels, the
/// spectral side is averaged to one value per spectral token and mapped onto
/// the spatial channels, then Z* = (1 + Z')·Z_spat. The pooled result is
/// projected back to D.
struct FusionHead {
  Tensor spat_w, spat_b;
  Tensor spec_w, spec_b;
  Tensor align_w, align_b;
  Tensor out_w, out_b;
};

struct EncoderParams {
  EncoderConfig config;
  Branch spatial;
  Branch spectral;
  FusionHead fusion;

  /// Visits every parameter with a stable dotted name, in checkpoint order.
  void for_each(const std::function<void(const std::string&, Tensor&, ParamRole)>& fn);
  void for_each(const std::function<void(const std::string&, const Tensor&, ParamRole)>& fn) const;

  /// Sets requires_grad on every parameter according to the phase.
  void set_phase(TrainPhase phase);

  std::size_t trainable_count() const;
  std::size_t parameter_count() const;
};

bool role_trainable(ParamRole role, TrainPhase phase) noexcept;

/// Random backbone, identity CP matrices.
EncoderParams init_encoder(const EncoderConfig& config, Rng& rng);

/// L·h·D'² per branch plus every fusion parameter.
std::size_t analytic_trainable_count(const EncoderConfig& config);

struct ForwardOptions {
  /// When false, attention is computed without the C matrices (plain SA).
  bool use_cp = true;
};

struct EmbeddingOutput {
  Tensor z;       // [B × D] fused embedding
  Tensor z_spat;  // [B·N_spat × D] final spatial tokens
  Tensor z_spec;  // [B·N_spec × D] final spectral tokens
};

/// Contiguous balanced partition of `channels` into `groups` ranges; the first
/// channels % groups ranges are one longer. Returns group start offsets plus
/// the end sentinel.
std::vector<std::size_t> balanced_partition(std::size_t channels, std::size_t groups);

/// [B × H × W × C] → [B·N_spat × p·p·C] non-overlapping spatial patches.
Tensor spatial_patchify(const Tensor& patches, std::size_t patch_size);
/// [B × H × W × C] → [B·N_spec × H·W], channel groups averaged.
Tensor spectral_group_means(const Tensor& patches, std::size_t n_spec);
/// One H×W×C patch → embedded spectral tokens [N_spec × D].
Tensor spectral_tokenize(const Tensor& patch, const Branch& spectral, std::size_t n_spec);

/// Pre-softmax attention logits Q·C·Kᵀ/√D' for `tokens` tokens per sample.
/// u: [B·tokens × D] (already layer-normalized). Returns [B × tokens × tokens].
Tensor attention_logits(const Tensor& u, std::size_t tokens, const AttentionHead& head,
                        const ForwardOptions& options = {});
/// softmax(Q·C·Kᵀ/√D')·V: [B·tokens × D] → [B·tokens × D'].
Tensor attention_cp(const Tensor& u, std::size_t tokens, const AttentionHead& head,
                    const ForwardOptions& options = {});
/// Concatenated heads projected back to D.
Tensor mhsa_cp(const Tensor& u, std::size_t tokens, const TransformerBlock& block,
               const ForwardOptions& options = {});
Tensor transformer_block(const Tensor& u, std::size_t tokens, const TransformerBlock& block,
                         double ln_eps, const ForwardOptions& options = {});

/// Runs both branches and the fusion head. patches: [B × H × W × C].
EmbeddingOutput encode_batch(const Tensor& patches, const EncoderParams& params,
                             const ForwardOptions& options = {});
/// Single patch [H × W × C]; z comes back as [D].
EmbeddingOutput encode(const Tensor& patch, const EncoderParams& params,
                       const ForwardOptions& options = {});

/// (1 + z')·z_spat with z' [B × D1] broadcast over the token groups of z_spat.
Tensor spectral_enhance(const Tensor& z_spat_reduced, const Tensor& z_prime, std::size_t tokens);

struct AttentionBlocks {
  Tensor real_real;                    // A₁,₁
  std::optional<Tensor> real_prompt;   // A₁,ₚ
  std::optional<Tensor> prompt_real;   // Aₚ,₁
  std::optional<Tensor> prompt_prompt; // Aₚ,ₚ
};

/// Splits a square attention map into its real-token and appended-token
/// blocks. Blocks with a zero extent come back empty.
AttentionBlocks attention_block_decomposition(const Tensor& attention, std::size_t n_real);

// Checkpoint file: "MIFO", u32 version, then records of
// (u32 name length, name bytes, u32 ndim, u32 dims..., f64 LE values...).
// Encoder hyper-parameters travel as scalar records named "config.*".

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const EncoderParams& params, const std::string& path);
EncoderParams read_checkpoint(const std::string& path);
std::vector<unsigned char> serialize_checkpoint(const EncoderParams& params);
EncoderParams deserialize_checkpoint(std::span<const unsigned char> bytes);

/// Binds trainable parameters to a tape for one optimisation step.
class ParamBinding {
 public:
  ParamBinding(const EncoderParams& params, Tape& tape);

  /// Copy of the parameters where trainable tensors are tape leaves.
  const EncoderParams& bound() const noexcept { return bound_; }
  /// (name, tape id) for every watched parameter.
  const std::vector<std::pair<std::string, std::size_t>>& watched() const noexcept { return watched_; }

 private:
  EncoderParams bound_;
  std::vector<std::pair<std::string, std::size_t>> watched_;
};

}  // namespace mifomo
