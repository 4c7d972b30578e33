#pragma once

// The stereo vision transformer: weight-shared encoder/decoder trunk over
// two camera views, a cross-attention fusion block, a shared convolutional
// upsampling head that emits one segmentation map per view, and an MLP
// force head reading the fused [CLS] token. The force-only variant drops
// the segmentation head but keeps the rest of the network identical.

#include <array>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stereovit/nn.hpp"
#include "stereovit/rng.hpp"
#include "stereovit/tensor.hpp"

namespace stereovit {

struct ModelConfig {
  int image_size = 64;
  int channels = 1;
  int patch_size = 8;
  int embed_dim = 64;
  int depth = 4;
  int heads = 2;
  int ffn_hidden = 256;
  int fusion_heads = 8;
  int fusion_ffn_hidden = 2048;
  int seg_base_channels = 96;
  std::array<int, 2> force_hidden = {64, 32};
  bool with_segmentation_heads = true;
  std::string variant = "custom";

  int patch_grid() const { return image_size / patch_size; }
  int token_count() const { return patch_grid() * patch_grid() + 1; }

  // Number of upsampling blocks; each doubles H and W, so the ladder climbs
  // from the patch grid back to the full image.
  int upsample_blocks() const {
    int u = 0, s = 1;
    while (s < patch_size) {
      s *= 2;
      ++u;
    }
    return u;
  }

  // First reduction stage target; the second stage lands on
  // seg_base_channels.
  int reduce_mid_channels() const { return std::max(seg_base_channels, embed_dim / 2); }

  void validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0) {
      throw std::invalid_argument("config: image_size must be a positive multiple of patch_size");
    }
    if (channels != 1 && channels != 3) {
      throw std::invalid_argument("config: channels must be 1 or 3");
    }
    if ((patch_size & (patch_size - 1)) != 0) {
      throw std::invalid_argument("config: patch_size must be a power of two");
    }
    if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0) {
      throw std::invalid_argument("config: embed_dim must be divisible by heads");
    }
    if (fusion_heads <= 0 || embed_dim % fusion_heads != 0) {
      throw std::invalid_argument("config: embed_dim must be divisible by fusion_heads");
    }
    if (depth < 0 || ffn_hidden <= 0 || fusion_ffn_hidden <= 0) {
      throw std::invalid_argument("config: depth/ffn sizes out of range");
    }
    if (force_hidden[0] <= 0 || force_hidden[1] <= 0) {
      throw std::invalid_argument("config: force head sizes must be positive");
    }
    if (with_segmentation_heads) {
      const int u = upsample_blocks();
      if (seg_base_channels <= 0 || seg_base_channels % (1 << u) != 0) {
        throw std::invalid_argument(
            "config: seg_base_channels must be divisible by 2^upsample_blocks");
      }
    }
  }

  static ModelConfig tiny() {
    ModelConfig c;
    c.image_size = 224;
    c.channels = 1;
    c.patch_size = 16;
    c.embed_dim = 192;
    c.depth = 12;
    c.heads = 3;
    c.ffn_hidden = 768;
    c.fusion_heads = 8;
    c.fusion_ffn_hidden = 2048;
    c.seg_base_channels = 96;
    c.variant = "tiny";
    return c;
  }

  static ModelConfig small() {
    ModelConfig c = tiny();
    c.embed_dim = 384;
    c.heads = 6;
    c.ffn_hidden = 1536;
    c.variant = "small";
    return c;
  }

  static ModelConfig desk() {
    ModelConfig c;
    c.image_size = 64;
    c.channels = 1;
    c.patch_size = 8;
    c.embed_dim = 64;
    c.depth = 4;
    c.heads = 2;
    c.ffn_hidden = 256;
    c.fusion_heads = 4;
    c.fusion_ffn_hidden = 256;
    c.seg_base_channels = 32;
    c.variant = "desk";
    return c;
  }

  static ModelConfig preset(const std::string& name) {
    if (name == "tiny") return tiny();
    if (name == "small" || name == "base") return small();
    if (name == "desk") return desk();
    throw std::invalid_argument("unknown model preset: " + name);
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"image_size", image_size},
                          {"channels", channels},
                          {"patch_size", patch_size},
                          {"embed_dim", embed_dim},
                          {"depth", depth},
                          {"heads", heads},
                          {"ffn_hidden", ffn_hidden},
                          {"fusion_heads", fusion_heads},
                          {"fusion_ffn_hidden", fusion_ffn_hidden},
                          {"seg_base_channels", seg_base_channels},
                          {"force_hidden", force_hidden},
                          {"with_segmentation_heads", with_segmentation_heads},
                          {"variant", variant}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.image_size = j.value("image_size", c.image_size);
    c.channels = j.value("channels", c.channels);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.depth = j.value("depth", c.depth);
    c.heads = j.value("heads", c.heads);
    c.ffn_hidden = j.value("ffn_hidden", c.ffn_hidden);
    c.fusion_heads = j.value("fusion_heads", c.fusion_heads);
    c.fusion_ffn_hidden = j.value("fusion_ffn_hidden", c.fusion_ffn_hidden);
    c.seg_base_channels = j.value("seg_base_channels", c.seg_base_channels);
    if (j.contains("force_hidden")) {
      c.force_hidden = j.at("force_hidden").get<std::array<int, 2>>();
    }
    c.with_segmentation_heads = j.value("with_segmentation_heads", c.with_segmentation_heads);
    c.variant = j.value("variant", c.variant);
    return c;
  }
};

struct ParamSpec {
  std::string name;
  std::vector<int64_t> shape;
  int64_t count() const { return shape_numel(shape); }
};

// Ordered list of every learnable tensor. Shared components (patch
// embedding, trunk, fusion, force head) come first so that the force-only
// variant draws identical initial values from the same seed.
inline std::vector<ParamSpec> parameter_ledger(const ModelConfig& c) {
  c.validate();
  const int64_t k = c.embed_dim;
  const int64_t tokens = c.token_count();
  std::vector<ParamSpec> out;
  out.push_back({"patch.proj.weight", {k, c.channels, c.patch_size, c.patch_size}});
  out.push_back({"patch.proj.bias", {k}});
  out.push_back({"patch.cls", {1, k}});
  out.push_back({"patch.pos", {tokens, k}});
  auto push_block = [&](const std::string& prefix, int64_t hidden) {
    out.push_back({prefix + ".ln1.gamma", {k}});
    out.push_back({prefix + ".ln1.beta", {k}});
    for (const char* w : {"wq", "wk", "wv", "wo"}) {
      out.push_back({prefix + ".attn." + w, {k, k}});
      out.push_back({prefix + ".attn.b" + std::string(1, w[1]), {k}});
    }
    out.push_back({prefix + ".ln2.gamma", {k}});
    out.push_back({prefix + ".ln2.beta", {k}});
    out.push_back({prefix + ".ffn.w1", {k, hidden}});
    out.push_back({prefix + ".ffn.b1", {hidden}});
    out.push_back({prefix + ".ffn.w2", {hidden, k}});
    out.push_back({prefix + ".ffn.b2", {k}});
  };
  for (int i = 0; i < c.depth; ++i) push_block("trunk." + std::to_string(i), c.ffn_hidden);
  push_block("fusion", c.fusion_ffn_hidden);
  out.push_back({"force.w1", {k, c.force_hidden[0]}});
  out.push_back({"force.b1", {c.force_hidden[0]}});
  out.push_back({"force.w2", {c.force_hidden[0], c.force_hidden[1]}});
  out.push_back({"force.b2", {c.force_hidden[1]}});
  out.push_back({"force.w3", {c.force_hidden[1], 3}});
  out.push_back({"force.b3", {3}});
  if (c.with_segmentation_heads) {
    const int64_t mid = c.reduce_mid_channels();
    const int64_t base = c.seg_base_channels;
    out.push_back({"seg.reduce1.weight", {mid, k, 3, 3}});
    out.push_back({"seg.reduce1.bias", {mid}});
    out.push_back({"seg.reduce2.weight", {base, mid, 3, 3}});
    out.push_back({"seg.reduce2.bias", {base}});
    int64_t ch = base;
    for (int u = 0; u < c.upsample_blocks(); ++u) {
      const std::string prefix = "seg.up" + std::to_string(u);
      out.push_back({prefix + ".conv.weight", {ch / 2, ch, 3, 3}});
      out.push_back({prefix + ".conv.bias", {ch / 2}});
      out.push_back({prefix + ".deconv.weight", {ch / 2, ch / 2, 4, 4}});
      out.push_back({prefix + ".deconv.bias", {ch / 2}});
      ch /= 2;
    }
    out.push_back({"seg.out.weight", {1, ch, 3, 3}});
    out.push_back({"seg.out.bias", {1}});
  }
  return out;
}

inline int64_t param_count(const ModelConfig& c) {
  int64_t total = 0;
  for (const auto& p : parameter_ledger(c)) total += p.count();
  return total;
}

template <class S>
struct PatchEmbedParams {
  Tensor<S> proj_weight, proj_bias, cls, pos;
};

template <class S>
struct SegHeadParams {
  Tensor<S> reduce1_w, reduce1_b, reduce2_w, reduce2_b;
  struct Up {
    Tensor<S> conv_w, conv_b, deconv_w, deconv_b;
  };
  std::vector<Up> ups;
  Tensor<S> out_w, out_b;
};

template <class S>
struct ForceHeadParams {
  Tensor<S> w1, b1, w2, b2, w3, b3;
};

template <class S>
struct ForwardResult {
  Tensor<S> seg_top;   // [H x W], absent in the force-only variant
  Tensor<S> seg_side;  // [H x W]
  Tensor<S> force;     // [3]
};

template <class S>
struct Diagnostics {
  Tensor<S> fusion_maps;  // [H x tokens x tokens]
};

template <class S>
class Model {
 public:
  static Model init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Model m;
    m.cfg_ = cfg;
    Rng rng(Rng::mix(seed, 0x6d6f64656cULL));
    for (const ParamSpec& spec : parameter_ledger(cfg)) {
      m.add_param(spec, rng);
    }
    m.wire();
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  const std::vector<std::pair<std::string, Tensor<S>>>& parameters() const { return params_; }

  Tensor<S> param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("unknown parameter: " + name);
    return params_[it->second].second;
  }

  bool has_param(const std::string& name) const { return index_.count(name) != 0; }

  int64_t live_param_count() const {
    int64_t total = 0;
    for (const auto& [name, t] : params_) total += t.size();
    return total;
  }

  // Patch projection, [CLS] prepend, positional embeddings.
  Tensor<S> patchify_embed(const Tensor<S>& image) const {
    check_image(image);
    const int64_t p = cfg_.patch_grid();
    const int64_t k = cfg_.embed_dim;
    Tensor<S> grid = conv2d(image, patch_.proj_weight, patch_.proj_bias, cfg_.patch_size, 0);
    Tensor<S> tokens = transpose(reshape(grid, {k, p * p}));
    tokens = concat(patch_.cls, tokens, 0);
    return add(tokens, patch_.pos);
  }

  // One trunk serves as both encoder and decoder.
  Tensor<S> trunk_forward(const Tensor<S>& tokens) const {
    Tensor<S> x = tokens;
    for (const auto& block : trunk_) x = transformer_block(x, block);
    return x;
  }

  Tensor<S> seg_head_forward(const Tensor<S>& tokens) const {
    if (!cfg_.with_segmentation_heads) {
      throw std::logic_error("seg_head_forward: model built without segmentation heads");
    }
    const int64_t p = cfg_.patch_grid();
    const int64_t k = cfg_.embed_dim;
    Tensor<S> patches = slice(tokens, 0, 1, p * p);
    Tensor<S> fmap = reshape(transpose(patches), {k, p, p});
    fmap = gelu(conv2d(fmap, seg_.reduce1_w, seg_.reduce1_b, 1, 1));
    fmap = gelu(conv2d(fmap, seg_.reduce2_w, seg_.reduce2_b, 1, 1));
    for (const auto& up : seg_.ups) {
      fmap = gelu(conv2d(fmap, up.conv_w, up.conv_b, 1, 1));
      fmap = transposed_conv2d(fmap, up.deconv_w, up.deconv_b, 2, 1);
    }
    Tensor<S> logits = conv2d(fmap, seg_.out_w, seg_.out_b, 1, 1);
    return reshape(sigmoid(logits), {cfg_.image_size, cfg_.image_size});
  }

  Tensor<S> force_head_forward(const Tensor<S>& cls_token) const {
    Tensor<S> h = gelu(add(matmul(cls_token, force_.w1), force_.b1));
    h = gelu(add(matmul(h, force_.w2), force_.b2));
    return reshape(add(matmul(h, force_.w3), force_.b3), {3});
  }

  ForwardResult<S> forward(const Tensor<S>& top_image, const Tensor<S>& side_image,
                           Diagnostics<S>* diag = nullptr) const {
    Tensor<S> x_t = trunk_forward(patchify_embed(top_image));
    Tensor<S> x_s = trunk_forward(patchify_embed(side_image));
    Tensor<S> maps;
    Tensor<S> fused = fusion_block(x_s, x_t, fusion_, diag ? &maps : nullptr);
    if (diag) diag->fusion_maps = maps;
    ForwardResult<S> out;
    out.force = force_head_forward(slice(fused, 0, 0, 1));
    if (cfg_.with_segmentation_heads) {
      out.seg_top = seg_head_forward(x_t);
      out.seg_side = seg_head_forward(fused);
    }
    return out;
  }

 private:
  void check_image(const Tensor<S>& image) const {
    const std::vector<int64_t> want = {cfg_.channels, cfg_.image_size, cfg_.image_size};
    if (image.shape() != want) {
      throw std::invalid_argument("forward: image " + shape_str(image.shape()) +
                                  " does not match configured " + shape_str(want));
    }
  }

  void add_param(const ParamSpec& spec, Rng& rng) {
    const std::string& n = spec.name;
    const std::string last = n.substr(n.rfind('.') + 1);
    Tensor<S> t;
    if (last == "gamma") {
      t = Tensor<S>::filled(spec.shape, static_cast<S>(1), true);
    } else if (last[0] == 'b' || last == "cls" || last == "pos") {
      // beta, bias, bq/bk/bv/bo, b1..b3, plus the [CLS] token and the
      // positional table all start at zero.
      t = Tensor<S>::zeros(spec.shape, true);
    } else {
      // Transformer weights follow the usual 0.02 truncated normal; the
      // convolutional ladder and the force MLP have no residual path or
      // normalization, so a flat 0.02 collapses their activations. Those
      // use fan-in scaled init instead.
      double std_dev = 0.02;
      if (n.rfind("seg.", 0) == 0 || n.rfind("force.", 0) == 0) {
        const int64_t fan_in = spec.shape.size() == 4
                                   ? spec.shape[1] * spec.shape[2] * spec.shape[3]
                                   : spec.shape[0];
        std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
      }
      std::vector<S> data(static_cast<size_t>(spec.count()));
      for (S& v : data) v = static_cast<S>(rng.truncated_normal(std_dev));
      t = Tensor<S>::from_data(spec.shape, std::move(data), true);
    }
    index_[n] = params_.size();
    params_.emplace_back(n, std::move(t));
  }

  // Binds the named tensors into the typed parameter structs.
  void wire() {
    patch_.proj_weight = param("patch.proj.weight");
    patch_.proj_bias = param("patch.proj.bias");
    patch_.cls = param("patch.cls");
    patch_.pos = param("patch.pos");
    auto wire_block = [this](const std::string& prefix) {
      BlockParams<S> b;
      b.ln1.gamma = param(prefix + ".ln1.gamma");
      b.ln1.beta = param(prefix + ".ln1.beta");
      b.attn.wq = param(prefix + ".attn.wq");
      b.attn.bq = param(prefix + ".attn.bq");
      b.attn.wk = param(prefix + ".attn.wk");
      b.attn.bk = param(prefix + ".attn.bk");
      b.attn.wv = param(prefix + ".attn.wv");
      b.attn.bv = param(prefix + ".attn.bv");
      b.attn.wo = param(prefix + ".attn.wo");
      b.attn.bo = param(prefix + ".attn.bo");
      b.ln2.gamma = param(prefix + ".ln2.gamma");
      b.ln2.beta = param(prefix + ".ln2.beta");
      b.ffn.w1 = param(prefix + ".ffn.w1");
      b.ffn.b1 = param(prefix + ".ffn.b1");
      b.ffn.w2 = param(prefix + ".ffn.w2");
      b.ffn.b2 = param(prefix + ".ffn.b2");
      return b;
    };
    trunk_.clear();
    for (int i = 0; i < cfg_.depth; ++i) {
      BlockParams<S> b = wire_block("trunk." + std::to_string(i));
      b.attn.heads = cfg_.heads;
      trunk_.push_back(std::move(b));
    }
    fusion_ = wire_block("fusion");
    fusion_.attn.heads = cfg_.fusion_heads;
    force_.w1 = param("force.w1");
    force_.b1 = param("force.b1");
    force_.w2 = param("force.w2");
    force_.b2 = param("force.b2");
    force_.w3 = param("force.w3");
    force_.b3 = param("force.b3");
    if (cfg_.with_segmentation_heads) {
      seg_.reduce1_w = param("seg.reduce1.weight");
      seg_.reduce1_b = param("seg.reduce1.bias");
      seg_.reduce2_w = param("seg.reduce2.weight");
      seg_.reduce2_b = param("seg.reduce2.bias");
      seg_.ups.clear();
      for (int u = 0; u < cfg_.upsample_blocks(); ++u) {
        const std::string prefix = "seg.up" + std::to_string(u);
        typename SegHeadParams<S>::Up up;
        up.conv_w = param(prefix + ".conv.weight");
        up.conv_b = param(prefix + ".conv.bias");
        up.deconv_w = param(prefix + ".deconv.weight");
        up.deconv_b = param(prefix + ".deconv.bias");
        seg_.ups.push_back(std::move(up));
      }
      seg_.out_w = param("seg.out.weight");
      seg_.out_b = param("seg.out.bias");
    }
  }

  friend struct ModelAccess;

  ModelConfig cfg_;
  std::vector<std::pair<std::string, Tensor<S>>> params_;
  std::map<std::string, size_t> index_;
  PatchEmbedParams<S> patch_;
  std::vector<BlockParams<S>> trunk_;
  BlockParams<S> fusion_;
  SegHeadParams<S> seg_;
  ForceHeadParams<S> force_;
};

}  // namespace stereovit
