#include "mifomo/encoder.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "bytes.hpp"
#include "mifomo/error.hpp"

namespace mifomo {

namespace {

Tensor xavier(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> d(fan_in * fan_out);
  for (double& v : d) v = rng.normal(0.0, sd);
  return Tensor({fan_in, fan_out}, std::move(d));
}

Tensor small_normal(Shape shape, double sd, Rng& rng) {
  std::vector<double> d(shape_numel(shape));
  for (double& v : d) v = rng.normal(0.0, sd);
  return Tensor(std::move(shape), std::move(d));
}

Branch init_branch(const EncoderConfig& cfg, std::size_t token_dim, std::size_t tokens, Rng& rng) {
  const std::size_t d = cfg.embed_dim, dh = cfg.head_dim();
  Branch br;
  br.embed_w = xavier(token_dim, d, rng);
  br.embed_b = Tensor::zeros({d});
  br.pos = small_normal({tokens, d}, 0.02, rng);
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    TransformerBlock blk;
    blk.ln1_gain = Tensor::full({d}, 1.0);
    blk.ln1_bias = Tensor::zeros({d});
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      AttentionHead head;
      head.w_q = xavier(d, dh, rng);
      head.w_k = xavier(d, dh, rng);
      head.w_v = xavier(d, dh, rng);
      head.cp = Tensor::identity(dh);
      blk.heads.push_back(std::move(head));
    }
    blk.w_out = xavier(cfg.heads * dh, d, rng);
    blk.ln2_gain = Tensor::full({d}, 1.0);
    blk.ln2_bias = Tensor::zeros({d});
    blk.ff1_w = xavier(d, cfg.mlp_dim, rng);
    blk.ff1_b = Tensor::zeros({cfg.mlp_dim});
    blk.ff2_w = xavier(cfg.mlp_dim, d, rng);
    blk.ff2_b = Tensor::zeros({d});
    br.blocks.push_back(std::move(blk));
  }
  br.lnf_gain = Tensor::full({d}, 1.0);
  br.lnf_bias = Tensor::zeros({d});
  return br;
}

template <class BranchT, class Fn>
void visit_branch(const std::string& prefix, BranchT& br, Fn&& fn) {
  fn(prefix + ".embed_w", br.embed_w, ParamRole::Backbone);
  fn(prefix + ".embed_b", br.embed_b, ParamRole::Backbone);
  fn(prefix + ".pos", br.pos, ParamRole::Backbone);
  for (std::size_t l = 0; l < br.blocks.size(); ++l) {
    auto& blk = br.blocks[l];
    const std::string b = prefix + ".block" + std::to_string(l);
    fn(b + ".ln1_gain", blk.ln1_gain, ParamRole::Backbone);
    fn(b + ".ln1_bias", blk.ln1_bias, ParamRole::Backbone);
    for (std::size_t h = 0; h < blk.heads.size(); ++h) {
      auto& head = blk.heads[h];
      const std::string hp = b + ".head" + std::to_string(h);
      fn(hp + ".w_q", head.w_q, ParamRole::Backbone);
      fn(hp + ".w_k", head.w_k, ParamRole::Backbone);
      fn(hp + ".w_v", head.w_v, ParamRole::Backbone);
      fn(hp + ".cp", head.cp, ParamRole::Projection);
    }
    fn(b + ".w_out", blk.w_out, ParamRole::Backbone);
    fn(b + ".ln2_gain", blk.ln2_gain, ParamRole::Backbone);
    fn(b + ".ln2_bias", blk.ln2_bias, ParamRole::Backbone);
    fn(b + ".ff1_w", blk.ff1_w, ParamRole::Backbone);
    fn(b + ".ff1_b", blk.ff1_b, ParamRole::Backbone);
    fn(b + ".ff2_w", blk.ff2_w, ParamRole::Backbone);
    fn(b + ".ff2_b", blk.ff2_b, ParamRole::Backbone);
  }
  fn(prefix + ".lnf_gain", br.lnf_gain, ParamRole::Backbone);
  fn(prefix + ".lnf_bias", br.lnf_bias, ParamRole::Backbone);
}

template <class ParamsT, class Fn>
void visit_all(ParamsT& p, Fn&& fn) {
  visit_branch("spatial", p.spatial, fn);
  visit_branch("spectral", p.spectral, fn);
  fn("fusion.spat_w", p.fusion.spat_w, ParamRole::Fusion);
  fn("fusion.spat_b", p.fusion.spat_b, ParamRole::Fusion);
  fn("fusion.spec_w", p.fusion.spec_w, ParamRole::Fusion);
  fn("fusion.spec_b", p.fusion.spec_b, ParamRole::Fusion);
  fn("fusion.align_w", p.fusion.align_w, ParamRole::Fusion);
  fn("fusion.align_b", p.fusion.align_b, ParamRole::Fusion);
  fn("fusion.out_w", p.fusion.out_w, ParamRole::Fusion);
  fn("fusion.out_b", p.fusion.out_b, ParamRole::Fusion);
}

// Linear index-map op: out[i] = scale_of(i) * in[src[i]] summed over repeats.
// Used by the tokenizers, which are fixed rearrangements of the input patch.
Tensor gather_linear(std::string_view kind, const Tensor& in, Shape shape,
                     std::vector<std::size_t> src, std::vector<double> weight) {
  const std::size_t n_out = shape_numel(shape);
  const std::size_t per_out = src.size() / n_out;
  std::vector<double> out(n_out, 0.0);
  for (std::size_t i = 0; i < n_out; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < per_out; ++j) s += weight[i * per_out + j] * in[src[i * per_out + j]];
    out[i] = s;
  }
  if (!in.on_tape()) return Tensor(std::move(shape), std::move(out));
  const Tensor* inputs[] = {&in};
  return in.tape()->record(
      kind, std::move(shape), std::move(out), inputs,
      [src = std::move(src), weight = std::move(weight), n_out, per_out](
          std::span<const double> g, std::span<std::vector<double>*> gi) {
        if (!gi[0]) return;
        for (std::size_t i = 0; i < n_out; ++i)
          for (std::size_t j = 0; j < per_out; ++j)
            (*gi[0])[src[i * per_out + j]] += weight[i * per_out + j] * g[i];
      });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add_bias(matmul(x, w), b); }

Tensor branch_forward(const Tensor& tokens_in, std::size_t tokens, const Branch& br,
                      std::size_t layers, double eps, const ForwardOptions& opt) {
  Tensor u = add_tiled(linear(tokens_in, br.embed_w, br.embed_b), br.pos);
  for (std::size_t l = 0; l < layers; ++l) u = transformer_block(u, tokens, br.blocks[l], eps, opt);
  return layer_norm(u, br.lnf_gain, br.lnf_bias, eps);
}

}  // namespace

// ---------------------------------------------------------------------------
// Config and parameters

void EncoderConfig::validate() const {
  auto need = [](bool ok, const char* key, const std::string& msg) {
    if (!ok) throw ConfigError(key, msg);
  };
  need(depth > 0, "encoder.depth", "must be positive");
  need(embed_dim >= 2, "encoder.embed_dim", "must be at least 2");
  need(heads > 0, "encoder.heads", "must be positive");
  need(embed_dim % heads == 0, "encoder.heads", "must divide embed_dim");
  need(mlp_dim > 0, "encoder.mlp_dim", "must be positive");
  need(patch_size > 0, "encoder.patch_size", "must be positive");
  need(window() % patch_size == 0, "encoder.patch_size",
       "must divide the spatial window " + std::to_string(window()));
  need(spectral_tokens > 0, "encoder.spectral_tokens", "must be positive");
  need(bands >= spectral_tokens, "encoder.spectral_tokens", "cannot exceed the band count");
  need(ln_eps > 0.0, "encoder.ln_eps", "must be positive");
}

void EncoderParams::for_each(const std::function<void(const std::string&, Tensor&, ParamRole)>& fn) {
  visit_all(*this, fn);
}

void EncoderParams::for_each(
    const std::function<void(const std::string&, const Tensor&, ParamRole)>& fn) const {
  visit_all(*this, fn);
}

bool role_trainable(ParamRole role, TrainPhase phase) noexcept {
  return phase == TrainPhase::Warmup || role != ParamRole::Backbone;
}

void EncoderParams::set_phase(TrainPhase phase) {
  for_each([phase](const std::string&, Tensor& t, ParamRole role) {
    t = t.with_requires_grad(role_trainable(role, phase));
  });
}

std::size_t EncoderParams::trainable_count() const {
  std::size_t n = 0;
  for_each([&n](const std::string&, const Tensor& t, ParamRole) {
    if (t.requires_grad()) n += t.numel();
  });
  return n;
}

std::size_t EncoderParams::parameter_count() const {
  std::size_t n = 0;
  for_each([&n](const std::string&, const Tensor& t, ParamRole) { n += t.numel(); });
  return n;
}

EncoderParams init_encoder(const EncoderConfig& config, Rng& rng) {
  config.validate();
  EncoderParams p;
  p.config = config;
  const std::size_t w = config.window();
  const std::size_t d = config.embed_dim, d1 = config.fusion_dim();
  p.spatial = init_branch(config, config.patch_size * config.patch_size * config.bands,
                          config.spatial_tokens(), rng);
  p.spectral = init_branch(config, w * w, config.spectral_tokens, rng);
  p.fusion.spat_w = xavier(d, d1, rng);
  p.fusion.spat_b = Tensor::zeros({d1});
  p.fusion.spec_w = xavier(d, d1, rng);
  p.fusion.spec_b = Tensor::zeros({d1});
  p.fusion.align_w = xavier(config.spectral_tokens, d1, rng);
  p.fusion.align_b = Tensor::zeros({d1});
  p.fusion.out_w = xavier(d1, d, rng);
  p.fusion.out_b = Tensor::zeros({d});
  p.set_phase(TrainPhase::Warmup);
  return p;
}

std::size_t analytic_trainable_count(const EncoderConfig& c) {
  const std::size_t dh = c.head_dim(), d = c.embed_dim, d1 = c.fusion_dim();
  const std::size_t cp_per_branch = c.depth * c.heads * dh * dh;
  const std::size_t fusion = (d * d1 + d1) + (d * d1 + d1) + (c.spectral_tokens * d1 + d1) + (d1 * d + d);
  return 2 * cp_per_branch + fusion;
}

// ---------------------------------------------------------------------------
// Tokenizers

std::vector<std::size_t> balanced_partition(std::size_t channels, std::size_t groups) {
  if (groups == 0 || groups > channels) {
    throw ConfigError("encoder.spectral_tokens", "cannot split " + std::to_string(channels) +
                                                     " channels into " + std::to_string(groups) + " groups");
  }
  std::vector<std::size_t> starts{0};
  const std::size_t base = channels / groups, extra = channels % groups;
  for (std::size_t g = 0; g < groups; ++g) starts.push_back(starts.back() + base + (g < extra ? 1 : 0));
  return starts;
}

Tensor spatial_patchify(const Tensor& patches, std::size_t p) {
  if (patches.rank() != 4) throw DimensionError("spatial_patchify: expected [B×H×W×C], got " + shape_str(patches.shape()));
  const std::size_t b = patches.dim(0), h = patches.dim(1), w = patches.dim(2), c = patches.dim(3);
  if (p == 0 || h % p != 0 || w % p != 0) {
    throw DimensionError("spatial_patchify: patch size " + std::to_string(p) + " does not tile " +
                         shape_str(patches.shape()));
  }
  const std::size_t gh = h / p, gw = w / p, tok = gh * gw, td = p * p * c;
  std::vector<std::size_t> src;
  src.reserve(b * tok * td);
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t ty = 0; ty < gh; ++ty)
      for (std::size_t tx = 0; tx < gw; ++tx)
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            for (std::size_t ch = 0; ch < c; ++ch)
              src.push_back(((s * h + ty * p + dy) * w + tx * p + dx) * c + ch);
  std::vector<double> weight(src.size(), 1.0);
  return gather_linear("spatial_patchify", patches, {b * tok, td}, std::move(src), std::move(weight));
}

Tensor spectral_group_means(const Tensor& patches, std::size_t n_spec) {
  if (patches.rank() != 4) {
    throw DimensionError("spectral_group_means: expected [B×H×W×C], got " + shape_str(patches.shape()));
  }
  const std::size_t b = patches.dim(0), hw = patches.dim(1) * patches.dim(2), c = patches.dim(3);
  const auto starts = balanced_partition(c, n_spec);
  // Groups differ in size by at most one; pad the short ones with zero weight.
  const std::size_t widest = starts[1] - starts[0];
  std::vector<std::size_t> src;
  std::vector<double> weight;
  src.reserve(b * n_spec * hw * widest);
  weight.reserve(src.capacity());
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t g = 0; g < n_spec; ++g) {
      const std::size_t lo = starts[g], hi = starts[g + 1];
      const double inv = 1.0 / static_cast<double>(hi - lo);
      for (std::size_t px = 0; px < hw; ++px)
        for (std::size_t j = 0; j < widest; ++j) {
          const bool real = lo + j < hi;
          src.push_back((s * hw + px) * c + (real ? lo + j : lo));
          weight.push_back(real ? inv : 0.0);
        }
    }
  return gather_linear("spectral_group_means", patches, {b * n_spec, hw}, std::move(src), std::move(weight));
}

Tensor spectral_tokenize(const Tensor& patch, const Branch& spectral, std::size_t n_spec) {
  if (patch.rank() != 3) throw DimensionError("spectral_tokenize: expected [H×W×C], got " + shape_str(patch.shape()));
  if (n_spec > patch.dim(2)) {
    throw ConfigError("encoder.spectral_tokens", std::to_string(n_spec) + " tokens exceed " +
                                                     std::to_string(patch.dim(2)) + " channels");
  }
  Tensor batched = reshape(patch, {1, patch.dim(0), patch.dim(1), patch.dim(2)});
  return linear(spectral_group_means(batched, n_spec), spectral.embed_w, spectral.embed_b);
}

// ---------------------------------------------------------------------------
// Attention

Tensor attention_logits(const Tensor& u, std::size_t tokens, const AttentionHead& head,
                        const ForwardOptions& options) {
  if (u.rank() != 2 || tokens == 0 || u.dim(0) % tokens != 0) {
    throw DimensionError("attention: " + shape_str(u.shape()) + " is not a whole number of " +
                         std::to_string(tokens) + "-token samples");
  }
  const std::size_t b = u.dim(0) / tokens, dh = head.w_q.dim(1);
  Tensor q = matmul(u, head.w_q);
  if (options.use_cp) q = matmul(q, head.cp);
  Tensor k = matmul(u, head.w_k);
  Tensor s = bmm_nt(reshape(q, {b, tokens, dh}), reshape(k, {b, tokens, dh}));
  return scale(s, 1.0 / std::sqrt(static_cast<double>(dh)));
}

Tensor attention_cp(const Tensor& u, std::size_t tokens, const AttentionHead& head,
                    const ForwardOptions& options) {
  Tensor a = softmax_rows(attention_logits(u, tokens, head, options));
  const std::size_t b = u.dim(0) / tokens, dh = head.w_v.dim(1);
  Tensor v = reshape(matmul(u, head.w_v), {b, tokens, dh});
  return reshape(bmm(a, v), {b * tokens, dh});
}

Tensor mhsa_cp(const Tensor& u, std::size_t tokens, const TransformerBlock& block,
               const ForwardOptions& options) {
  std::vector<Tensor> outs;
  outs.reserve(block.heads.size());
  for (const auto& head : block.heads) outs.push_back(attention_cp(u, tokens, head, options));
  Tensor cat = outs.size() == 1 ? outs.front() : concat_cols(outs);
  return matmul(cat, block.w_out);
}

Tensor transformer_block(const Tensor& u, std::size_t tokens, const TransformerBlock& block,
                         double ln_eps, const ForwardOptions& options) {
  Tensor u1 = add(u, mhsa_cp(layer_norm(u, block.ln1_gain, block.ln1_bias, ln_eps), tokens, block, options));
  Tensor h = layer_norm(u1, block.ln2_gain, block.ln2_bias, ln_eps);
  Tensor f = linear(gelu(linear(h, block.ff1_w, block.ff1_b)), block.ff2_w, block.ff2_b);
  return add(u1, f);
}

// ---------------------------------------------------------------------------
// Full encoder

Tensor spectral_enhance(const Tensor& z_spat_reduced, const Tensor& z_prime, std::size_t tokens) {
  return mul(add_scalar(repeat_rows(z_prime, tokens), 1.0), z_spat_reduced);
}

EmbeddingOutput encode_batch(const Tensor& patches, const EncoderParams& params, const ForwardOptions& options) {
  const EncoderConfig& cfg = params.config;
  const std::size_t w = cfg.window();
  if (patches.rank() != 4 || patches.dim(1) != w || patches.dim(2) != w || patches.dim(3) != cfg.bands) {
    throw DimensionError("encode: expected [B×" + std::to_string(w) + "x" + std::to_string(w) + "x" +
                         std::to_string(cfg.bands) + "], got " + shape_str(patches.shape()));
  }
  const std::size_t b = patches.dim(0);
  const std::size_t n_spat = cfg.spatial_tokens(), n_spec = cfg.spectral_tokens;

  EmbeddingOutput out;
  out.z_spat = branch_forward(spatial_patchify(patches, cfg.patch_size), n_spat, params.spatial, cfg.depth,
                              cfg.ln_eps, options);
  out.z_spec = branch_forward(spectral_group_means(patches, n_spec), n_spec, params.spectral,
                              cfg.spectral_depth_used(), cfg.ln_eps, options);

  const FusionHead& f = params.fusion;
  Tensor zs = linear(out.z_spat, f.spat_w, f.spat_b);
  Tensor zp = linear(out.z_spec, f.spec_w, f.spec_b);
  Tensor zbar = reshape(mean_last_axis(zp), {b, n_spec});
  Tensor z_prime = linear(zbar, f.align_w, f.align_b);
  Tensor pooled = mean_groups(spectral_enhance(zs, z_prime, n_spat), n_spat);
  out.z = linear(pooled, f.out_w, f.out_b);
  return out;
}

EmbeddingOutput encode(const Tensor& patch, const EncoderParams& params, const ForwardOptions& options) {
  if (patch.rank() != 3) throw DimensionError("encode: expected [H×W×C], got " + shape_str(patch.shape()));
  EmbeddingOutput out =
      encode_batch(reshape(patch, {1, patch.dim(0), patch.dim(1), patch.dim(2)}), params, options);
  out.z = reshape(out.z, {params.config.embed_dim});
  return out;
}

AttentionBlocks attention_block_decomposition(const Tensor& a, std::size_t n_real) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    throw DimensionError("attention_block_decomposition: expected a square map, got " + shape_str(a.shape()));
  }
  const std::size_t n = a.dim(0);
  if (n_real == 0 || n_real > n) {
    throw ContractError("attention_block_decomposition: n_real " + std::to_string(n_real) +
                        " outside (0, " + std::to_string(n) + "]");
  }
  auto block = [&](std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) -> std::optional<Tensor> {
    if (r1 == r0 || c1 == c0) return std::nullopt;
    std::vector<double> d;
    d.reserve((r1 - r0) * (c1 - c0));
    for (std::size_t r = r0; r < r1; ++r)
      for (std::size_t c = c0; c < c1; ++c) d.push_back(a.at(r, c));
    return Tensor({r1 - r0, c1 - c0}, std::move(d));
  };
  AttentionBlocks out;
  out.real_real = *block(0, n_real, 0, n_real);
  out.real_prompt = block(0, n_real, n_real, n);
  out.prompt_real = block(n_real, n, 0, n_real);
  out.prompt_prompt = block(n_real, n, n_real, n);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

using bytes::put_f64;
using bytes::put_u32;
using bytes::Reader;

void put_record(std::vector<unsigned char>& out, const std::string& name, const Shape& shape,
                std::span<const double> values) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.insert(out.end(), name.begin(), name.end());
  put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (std::size_t d : shape) put_u32(out, static_cast<std::uint32_t>(d));
  for (double v : values) put_f64(out, v);
}

struct ConfigField {
  const char* name;
  double (*get)(const EncoderConfig&);
  void (*set)(EncoderConfig&, double);
};

#define MIFOMO_SIZE_FIELD(field)                                                     \
  ConfigField {                                                                      \
    "config." #field, [](const EncoderConfig& c) { return static_cast<double>(c.field); }, \
        [](EncoderConfig& c, double v) { c.field = static_cast<std::size_t>(v); }    \
  }

const ConfigField kConfigFields[] = {
    MIFOMO_SIZE_FIELD(depth),           MIFOMO_SIZE_FIELD(embed_dim), MIFOMO_SIZE_FIELD(heads),
    MIFOMO_SIZE_FIELD(mlp_dim),         MIFOMO_SIZE_FIELD(patch_size), MIFOMO_SIZE_FIELD(spectral_tokens),
    MIFOMO_SIZE_FIELD(bands),           MIFOMO_SIZE_FIELD(patch_radius),
    ConfigField{"config.ln_eps", [](const EncoderConfig& c) { return c.ln_eps; },
                [](EncoderConfig& c, double v) { c.ln_eps = v; }},
};

#undef MIFOMO_SIZE_FIELD

}  // namespace

std::vector<unsigned char> serialize_checkpoint(const EncoderParams& params) {
  std::vector<unsigned char> out{'M', 'I', 'F', 'O'};
  put_u32(out, kCheckpointVersion);
  for (const auto& field : kConfigFields) {
    const double v = field.get(params.config);
    put_record(out, field.name, {}, std::span<const double>(&v, 1));
  }
  params.for_each([&out](const std::string& name, const Tensor& t, ParamRole) {
    put_record(out, name, t.shape(), t.data());
  });
  return out;
}

EncoderParams deserialize_checkpoint(std::span<const unsigned char> bytes) {
  Reader rd(bytes);
  if (rd.str(4, "magic") != "MIFO") throw FormatError(0, "bad checkpoint magic");
  const std::uint32_t version = rd.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError(4, "unsupported checkpoint version " + std::to_string(version));
  }
  std::map<std::string, Tensor> records;
  std::map<std::string, std::size_t> offsets;
  while (!rd.done()) {
    const std::size_t start = rd.pos();
    const std::uint32_t name_len = rd.u32("record name length");
    if (name_len == 0 || name_len > 4096) throw FormatError(start, "implausible record name length");
    std::string name = rd.str(name_len, "record name");
    const std::uint32_t ndim = rd.u32("record rank");
    if (ndim > 8) throw FormatError(start, "implausible rank for record " + name);
    Shape shape;
    for (std::uint32_t i = 0; i < ndim; ++i) shape.push_back(rd.u32("record dims"));
    const std::size_t n = shape_numel(shape);
    if (n > (bytes.size() - rd.pos()) / 8) throw FormatError(rd.pos(), "truncated values of record " + name);
    std::vector<double> values(n);
    for (double& v : values) v = rd.f64("record values");
    if (records.count(name)) throw FormatError(start, "duplicate record " + name);
    offsets[name] = start;
    records.emplace(name, Tensor(std::move(shape), std::move(values)));
  }

  EncoderConfig cfg;
  for (const auto& field : kConfigFields) {
    auto it = records.find(field.name);
    if (it == records.end()) throw FormatError(bytes.size(), std::string("missing record ") + field.name);
    field.set(cfg, it->second.item());
    records.erase(it);
  }
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw FormatError(8, std::string("checkpoint carries an invalid encoder config: ") + e.what());
  }

  Rng scratch(0);
  EncoderParams params = init_encoder(cfg, scratch);
  params.for_each([&](const std::string& name, Tensor& t, ParamRole) {
    auto it = records.find(name);
    if (it == records.end()) throw FormatError(bytes.size(), "missing record " + name);
    if (it->second.shape() != t.shape()) {
      throw FormatError(offsets[name], "record " + name + " has shape " + shape_str(it->second.shape()) +
                                           ", expected " + shape_str(t.shape()));
    }
    t = it->second;
    records.erase(it);
  });
  if (!records.empty()) {
    const auto& [name, _] = *records.begin();
    throw FormatError(offsets[name], "unknown record " + name);
  }
  params.set_phase(TrainPhase::Adaptation);
  return params;
}

void write_checkpoint(const EncoderParams& params, const std::string& path) {
  const auto bytes = serialize_checkpoint(params);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed for " + path);
}

EncoderParams read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

// ---------------------------------------------------------------------------

ParamBinding::ParamBinding(const EncoderParams& params, Tape& tape) : bound_(params) {
  bound_.for_each([this, &tape](const std::string& name, Tensor& t, ParamRole) {
    if (!t.requires_grad()) return;
    t = tape.watch(t);
    watched_.emplace_back(name, *t.tape_id());
  });
}

}  // namespace mifomo
