// The five forecasting architectures: UNet, U2Net (nested residual
// U-blocks), UNETR (ViT encoder + convolutional decoder), TEUNet (time
// embeddings at the bottleneck) and OdeUNet (latent dynamics integrated
// over the forecast horizon). All map a volume to a volume of the same
// shape as a residual update on the input.
#pragma once

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <string>

#include "volforecast/nn.hpp"
#include "volforecast/ode.hpp"
#include "volforecast/tensor.hpp"
#include "volforecast/volume.hpp"

namespace volf {

enum class Arch { UNet, U2Net, UNETR, TEUNet, OdeUNet };

inline std::string arch_tag(Arch a) {
  switch (a) {
    case Arch::UNet: return "unet";
    case Arch::U2Net: return "u2net";
    case Arch::UNETR: return "unetr";
    case Arch::TEUNet: return "teunet";
    case Arch::OdeUNet: return "odeunet";
  }
  throw std::logic_error("bad arch");
}

inline Arch arch_from_tag(const std::string& tag) {
  if (tag == "unet") return Arch::UNet;
  if (tag == "u2net") return Arch::U2Net;
  if (tag == "unetr") return Arch::UNETR;
  if (tag == "teunet") return Arch::TEUNet;
  if (tag == "odeunet") return Arch::OdeUNet;
  throw std::invalid_argument("unknown architecture tag: " + tag);
}

struct ModelSpec {
  Arch arch = Arch::UNet;
  int base_channels = 8;
  int depth = 3;
  int patch_size = 4;        // UNETR
  int embed_dim = 64;        // UNETR
  int heads = 4;             // UNETR
  int transformer_layers = 4;
  int time_embed_dim = 16;   // TEUNet / OdeUNet
  int ode_steps = 8;         // OdeUNet, steps per 24 months

  void validate(const std::array<int, 3>& dims_dhw) const {
    const int div = 1 << depth;
    for (int d : dims_dhw)
      if (d % div != 0)
        throw std::invalid_argument("input dims must be divisible by 2^depth");
    if (arch == Arch::UNETR) {
      for (int d : dims_dhw)
        if (d % patch_size != 0)
          throw std::invalid_argument("input dims must be divisible by patch_size");
      if (embed_dim % heads != 0)
        throw std::invalid_argument("embed_dim must be divisible by heads");
      if (patch_size < 1 || (patch_size & (patch_size - 1)) != 0)
        throw std::invalid_argument("patch_size must be a power of two");
    }
  }
};

// Owns parameters and tracks which ones the optimizer may update.
template <typename T>
class ParamStore {
 public:
  Parameter<T>* add(const std::string& name, Tensor<T> init, bool frozen = false) {
    init.node()->requires_grad = !frozen;
    owned_.push_back(std::make_unique<Parameter<T>>(name, std::move(init)));
    Parameter<T>* p = owned_.back().get();
    all_.push_back(p);
    if (!frozen) trainable_.push_back(p);
    return p;
  }
  const std::vector<Parameter<T>*>& trainable() const { return trainable_; }
  const std::vector<Parameter<T>*>& all() const { return all_; }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> owned_;
  std::vector<Parameter<T>*> trainable_, all_;
};

namespace detail {

template <typename T>
Tensor<T> ones(std::vector<int> shape) {
  return Tensor<T>::full(std::move(shape), T(1), true);
}
template <typename T>
Tensor<T> zeros_t(std::vector<int> shape) {
  return Tensor<T>::zeros(std::move(shape), true);
}

}  // namespace detail

// conv3 + batchless norm + relu
template <typename T>
struct ConvUnit {
  Parameter<T>*w = nullptr, *b = nullptr, *gamma = nullptr, *beta = nullptr;
  int stride = 1, padding = 1, kernel = 3;

  ConvUnit() = default;
  ConvUnit(ParamStore<T>& ps, std::mt19937_64& rng, const std::string& prefix, int cin, int cout,
           int kernel_ = 3, int stride_ = 1, bool frozen = false, double gain = 1.0)
      : stride(stride_), padding(kernel_ / 2), kernel(kernel_) {
    const int64_t fan_in = static_cast<int64_t>(cin) * kernel_ * kernel_ * kernel_;
    w = ps.add(prefix + ".w", uniform_init<T>({cout, cin, kernel_, kernel_, kernel_}, fan_in, rng, gain), frozen);
    b = ps.add(prefix + ".b", uniform_init<T>({cout}, fan_in, rng, gain), frozen);
    gamma = ps.add(prefix + ".gamma", detail::ones<T>({cout}), frozen);
    beta = ps.add(prefix + ".beta", detail::zeros_t<T>({cout}), frozen);
  }
  Tensor<T> forward(const Tensor<T>& x) const {
    return relu(batchless_norm(conv3d(x, w->value, b->value, stride, padding), gamma->value, beta->value));
  }
};

// Plain convolution, no norm or activation (heads, projections).
template <typename T>
struct PlainConv {
  Parameter<T>*w = nullptr, *b = nullptr;
  int stride = 1, padding = 0;

  PlainConv() = default;
  PlainConv(ParamStore<T>& ps, std::mt19937_64& rng, const std::string& prefix, int cin, int cout,
            int kernel = 1, int stride_ = 1, bool frozen = false, double gain = 1.0)
      : stride(stride_), padding(kernel % 2 == 1 ? kernel / 2 : 0) {  // even kernels: valid (patch embed)
    const int64_t fan_in = static_cast<int64_t>(cin) * kernel * kernel * kernel;
    w = ps.add(prefix + ".w", uniform_init<T>({cout, cin, kernel, kernel, kernel}, fan_in, rng, gain), frozen);
    b = ps.add(prefix + ".b", uniform_init<T>({cout}, fan_in, rng, gain), frozen);
  }
  Tensor<T> forward(const Tensor<T>& x) const {
    return conv3d(x, w->value, b->value, stride, padding);
  }
};

template <typename T>
struct DoubleConv {
  ConvUnit<T> c1, c2;
  DoubleConv() = default;
  DoubleConv(ParamStore<T>& ps, std::mt19937_64& rng, const std::string& prefix, int cin, int cout,
             bool frozen = false)
      : c1(ps, rng, prefix + ".c1", cin, cout, 3, 1, frozen),
        c2(ps, rng, prefix + ".c2", cout, cout, 3, 1, frozen) {}
  Tensor<T> forward(const Tensor<T>& x) const { return c2.forward(c1.forward(x)); }
};

template <typename T>
struct DenseLayer {
  Parameter<T>*w = nullptr, *b = nullptr;
  DenseLayer() = default;
  DenseLayer(ParamStore<T>& ps, std::mt19937_64& rng, const std::string& prefix, int in, int out,
             double gain = 1.0) {
    w = ps.add(prefix + ".w", uniform_init<T>({out, in}, in, rng, gain));
    b = ps.add(prefix + ".b", uniform_init<T>({out}, in, rng, gain));
  }
  Tensor<T> forward(const Tensor<T>& x) const { return linear(x, w->value, b->value); }
};

// --- shared UNet encoder / decoder ----------------------------------------

template <typename T>
struct UNetEncoder {
  DoubleConv<T> stem;
  std::vector<ConvUnit<T>> downs;       // stride-2 convs
  std::vector<DoubleConv<T>> blocks;    // per-level double conv
  int depth = 0, base = 0;

  UNetEncoder() = default;
  UNetEncoder(ParamStore<T>& ps, std::mt19937_64& rng, const std::string& prefix, int base_,
              int depth_, bool frozen = false)
      : depth(depth_), base(base_) {
    stem = DoubleConv<T>(ps, rng, prefix + ".stem", 1, base_, frozen);
    for (int l = 1; l <= depth_; ++l) {
      const int cin = base_ << (l - 1), cout = base_ << l;
      downs.emplace_back(ps, rng, prefix + ".down" + std::to_string(l), cin, cout, 3, 2, frozen);
      blocks.emplace_back(ps, rng, prefix + ".enc" + std::to_string(l), cout, cout, frozen);
    }
  }

  // Returns features per level; back() is the bottleneck.
  std::vector<Tensor<T>> forward(const Tensor<T>& x) const {
    std::vector<Tensor<T>> feats;
    feats.push_back(stem.forward(x));
    for (int l = 0; l < depth; ++l)
      feats.push_back(blocks[static_cast<size_t>(l)].forward(
          downs[static_cast<size_t>(l)].forward(feats.back())));
    return feats;
  }
};

template <typename T>
struct UNetDecoder {
  std::vector<ConvUnit<T>> up_convs;    // conv after nearest upsample
  std::vector<DoubleConv<T>> blocks;    // after skip concat
  PlainConv<T> head;
  int depth = 0;

  UNetDecoder() = default;
  UNetDecoder(ParamStore<T>& ps, std::mt19937_64& rng, const std::string& prefix, int base,
              int depth_)
      : depth(depth_) {
    for (int l = depth_; l >= 1; --l) {
      const int cin = base << l, cout = base << (l - 1);
      up_convs.emplace_back(ps, rng, prefix + ".up" + std::to_string(l), cin, cout, 3, 1);
      blocks.emplace_back(ps, rng, prefix + ".dec" + std::to_string(l), 2 * cout, cout);
    }
    // small-gain head keeps the residual update near zero at init
    head = PlainConv<T>(ps, rng, prefix + ".head", base, 1, 1, 1, false, 0.01);
  }

  Tensor<T> forward(const std::vector<Tensor<T>>& feats, const Tensor<T>& bottleneck) const {
    Tensor<T> h = bottleneck;
    for (int i = 0; i < depth; ++i) {
      h = up_convs[static_cast<size_t>(i)].forward(upsample3d_nearest(h, 2));
      const Tensor<T>& skip = feats[static_cast<size_t>(depth - 1 - i)];
      h = blocks[static_cast<size_t>(i)].forward(concat_channels(skip, h));
    }
    return head.forward(h);
  }
};

// --- model base ------------------------------------------------------------

template <typename T>
class Model {
 public:
  ModelSpec spec;
  std::array<int, 3> input_dims{};  // D, H, W (z, y, x)

  virtual ~Model() = default;
  // x: [1,1,D,H,W]; returns the same shape.
  virtual Tensor<T> forward(const Tensor<T>& x, double t1_months, double horizon_months) = 0;

  const std::vector<Parameter<T>*>& parameters() const { return store_.trainable(); }
  const std::vector<Parameter<T>*>& all_parameters() const { return store_.all(); }

 protected:
  ParamStore<T> store_;
};

// --- UNet / TEUNet / OdeUNet ------------------------------------------------

template <typename T>
class UNetModel : public Model<T> {
 public:
  UNetEncoder<T> encoder;
  UNetDecoder<T> decoder;

  UNetModel(const ModelSpec& spec, const std::array<int, 3>& dims, std::mt19937_64& rng) {
    this->spec = spec;
    this->input_dims = dims;
    encoder = UNetEncoder<T>(this->store_, rng, "enc", spec.base_channels, spec.depth);
    decoder = UNetDecoder<T>(this->store_, rng, "dec", spec.base_channels, spec.depth);
  }

  Tensor<T> forward(const Tensor<T>& x, double, double) override {
    auto feats = encoder.forward(x);
    return add(x, decoder.forward(feats, feats.back()));
  }
};

// Sinusoidal features of (t1/120, horizon/24): 4 frequencies per scalar.
template <typename T>
Tensor<T> time_feature_tensor(double t1_months, double horizon_months) {
  const double u[2] = {t1_months / 120.0, horizon_months / 24.0};
  std::vector<T> f;
  f.reserve(8);
  for (double uu : u)
    for (int j = 0; j < 2; ++j) {
      const double w = 3.14159265358979323846 * std::ldexp(1.0, j);
      f.push_back(static_cast<T>(std::sin(w * uu)));
      f.push_back(static_cast<T>(std::cos(w * uu)));
    }
  return Tensor<T>({1, 8}, std::move(f), false);
}

template <typename T>
class TEUNetModel : public Model<T> {
 public:
  UNetEncoder<T> encoder;
  UNetDecoder<T> decoder;
  DenseLayer<T> time_fc1, time_fc2;

  TEUNetModel(const ModelSpec& spec, const std::array<int, 3>& dims, std::mt19937_64& rng) {
    this->spec = spec;
    this->input_dims = dims;
    encoder = UNetEncoder<T>(this->store_, rng, "enc", spec.base_channels, spec.depth);
    decoder = UNetDecoder<T>(this->store_, rng, "dec", spec.base_channels, spec.depth);
    const int cb = spec.base_channels << spec.depth;
    time_fc1 = DenseLayer<T>(this->store_, rng, "time.fc1", 8, spec.time_embed_dim);
    time_fc2 = DenseLayer<T>(this->store_, rng, "time.fc2", spec.time_embed_dim, cb);
  }

  Tensor<T> forward(const Tensor<T>& x, double t1, double horizon) override {
    auto feats = encoder.forward(x);
    Tensor<T> tf = time_feature_tensor<T>(t1, horizon);
    Tensor<T> emb = time_fc2.forward(relu(time_fc1.forward(tf)));  // [1, cb]
    const int cb = this->spec.base_channels << this->spec.depth;
    Tensor<T> bottleneck = add_channel_bias(feats.back(), reshape(emb, {cb}));
    return add(x, decoder.forward(feats, bottleneck));
  }
};

template <typename T>
class OdeUNetModel : public Model<T> {
 public:
  UNetEncoder<T> encoder;
  UNetDecoder<T> decoder;
  ConvUnit<T> field_c1;
  PlainConv<T> field_c2;
  UNetEncoder<T> frozen_encoder;  // random features for the perceptual loss

  OdeUNetModel(const ModelSpec& spec, const std::array<int, 3>& dims, std::mt19937_64& rng) {
    this->spec = spec;
    this->input_dims = dims;
    encoder = UNetEncoder<T>(this->store_, rng, "enc", spec.base_channels, spec.depth);
    decoder = UNetDecoder<T>(this->store_, rng, "dec", spec.base_channels, spec.depth);
    const int cb = spec.base_channels << spec.depth;
    field_c1 = ConvUnit<T>(this->store_, rng, "field.c1", cb + 1, cb, 3, 1);
    // mild dynamics at init
    field_c2 = PlainConv<T>(this->store_, rng, "field.c2", cb, cb, 3, 1, false, 0.1);
    frozen_encoder = UNetEncoder<T>(this->store_, rng, "frozen_enc", spec.base_channels, spec.depth,
                                    /*frozen=*/true);
  }

  Tensor<T> encode_latent(const Tensor<T>& x) { return encoder.forward(x).back(); }

  // dZ/dt with time (months, normalized by 120) as an extra channel.
  Tensor<T> vector_field(const Tensor<T>& z, double t_months) {
    Tensor<T> tc = Tensor<T>::full({z.dim(0), 1, z.dim(2), z.dim(3), z.dim(4)},
                                   static_cast<T>(t_months / 120.0));
    return field_c2.forward(field_c1.forward(concat_channels(z, tc)));
  }

  Tensor<T> integrate_latent(Tensor<T> z, double t1, double horizon) {
    if (horizon == 0.0) return z;
    const int steps = std::max(1, static_cast<int>(std::llround(
                                      this->spec.ode_steps * horizon / 24.0)));
    auto f = [this](const Tensor<T>& zz, double tt) { return vector_field(zz, tt); };
    return integrate_rk4<T>(f, std::move(z), t1, t1 + horizon, steps);
  }

  std::vector<Tensor<T>> frozen_features(const Tensor<T>& x) { return frozen_encoder.forward(x); }

  Tensor<T> forward(const Tensor<T>& x, double t1, double horizon) override {
    auto feats = encoder.forward(x);
    Tensor<T> z = integrate_latent(feats.back(), t1, horizon);
    return add(x, decoder.forward(feats, z));
  }
};

// --- U2Net -------------------------------------------------------------------

// Residual U-block: conv-in branch plus an inner encoder/decoder of the
// given height operating on the block's features.
template <typename T>
struct RsuBlock {
  ConvUnit<T> conv_in;
  std::vector<ConvUnit<T>> enc;    // enc[0] at full res, then after downsamples
  std::vector<ConvUnit<T>> downs;
  std::vector<ConvUnit<T>> ups;    // conv after upsample
  std::vector<ConvUnit<T>> dec;    // after concat
  PlainConv<T> final_conv;
  int height = 1;

  RsuBlock() = default;
  RsuBlock(ParamStore<T>& ps, std::mt19937_64& rng, const std::string& prefix, int cin, int cout,
           int mid, int height_)
      : height(height_) {
    conv_in = ConvUnit<T>(ps, rng, prefix + ".in", cin, cout, 3, 1);
    enc.emplace_back(ps, rng, prefix + ".e0", cout, mid);
    for (int l = 1; l < height_; ++l) {
      downs.emplace_back(ps, rng, prefix + ".d" + std::to_string(l), mid, mid, 3, 2);
      enc.emplace_back(ps, rng, prefix + ".e" + std::to_string(l), mid, mid);
    }
    for (int l = height_ - 1; l >= 1; --l) {
      ups.emplace_back(ps, rng, prefix + ".u" + std::to_string(l), mid, mid);
      dec.emplace_back(ps, rng, prefix + ".dc" + std::to_string(l), 2 * mid, mid);
    }
    final_conv = PlainConv<T>(ps, rng, prefix + ".out", mid, cout, 3, 1);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    for (int i = 2; i < x.rank(); ++i)
      if (x.dim(i) < (1 << (height - 1)))
        throw std::invalid_argument("rsu block: spatial dims too small for height");
    Tensor<T> xin = conv_in.forward(x);
    std::vector<Tensor<T>> feats;
    feats.push_back(enc[0].forward(xin));
    for (int l = 1; l < height; ++l)
      feats.push_back(enc[static_cast<size_t>(l)].forward(
          downs[static_cast<size_t>(l - 1)].forward(feats.back())));
    Tensor<T> h = feats.back();
    for (int i = 0; i < height - 1; ++i) {
      h = ups[static_cast<size_t>(i)].forward(upsample3d_nearest(h, 2));
      h = dec[static_cast<size_t>(i)].forward(
          concat_channels(feats[static_cast<size_t>(height - 2 - i)], h));
    }
    return add(xin, final_conv.forward(h));
  }
};

template <typename T>
class U2NetModel : public Model<T> {
 public:
  std::vector<RsuBlock<T>> enc_blocks;  // depth + 1 levels
  std::vector<ConvUnit<T>> downs;
  std::vector<ConvUnit<T>> up_convs;
  std::vector<RsuBlock<T>> dec_blocks;
  PlainConv<T> head;

  static int rsu_height(int level) { return std::max(1, 3 - level); }

  U2NetModel(const ModelSpec& spec, const std::array<int, 3>& dims, std::mt19937_64& rng) {
    this->spec = spec;
    this->input_dims = dims;
    auto& ps = this->store_;
    const int base = spec.base_channels;
    enc_blocks.emplace_back(ps, rng, "enc0", 1, base, base / 2 > 0 ? base / 2 : 1, rsu_height(0));
    for (int l = 1; l <= spec.depth; ++l) {
      const int cin = base << (l - 1), cout = base << l;
      downs.emplace_back(ps, rng, "down" + std::to_string(l), cin, cout, 3, 2);
      enc_blocks.emplace_back(ps, rng, "enc" + std::to_string(l), cout, cout, cout / 2,
                              rsu_height(l));
    }
    for (int l = spec.depth; l >= 1; --l) {
      const int cin = base << l, cout = base << (l - 1);
      up_convs.emplace_back(ps, rng, "up" + std::to_string(l), cin, cout);
      dec_blocks.emplace_back(ps, rng, "dec" + std::to_string(l), 2 * cout, cout, cout / 2 > 0 ? cout / 2 : 1,
                              rsu_height(l - 1));
    }
    head = PlainConv<T>(ps, rng, "head", base, 1, 1, 1, false, 0.01);
  }

  Tensor<T> forward(const Tensor<T>& x, double, double) override {
    std::vector<Tensor<T>> feats;
    feats.push_back(enc_blocks[0].forward(x));
    for (int l = 1; l <= this->spec.depth; ++l)
      feats.push_back(enc_blocks[static_cast<size_t>(l)].forward(
          downs[static_cast<size_t>(l - 1)].forward(feats.back())));
    Tensor<T> h = feats.back();
    for (int i = 0; i < this->spec.depth; ++i) {
      h = up_convs[static_cast<size_t>(i)].forward(upsample3d_nearest(h, 2));
      h = dec_blocks[static_cast<size_t>(i)].forward(
          concat_channels(feats[static_cast<size_t>(this->spec.depth - 1 - i)], h));
    }
    return add(x, head.forward(h));
  }
};

// --- UNETR -------------------------------------------------------------------

template <typename T>
struct TransformerLayer {
  Parameter<T>*ln1_g, *ln1_b, *ln2_g, *ln2_b;
  Parameter<T>*wq, *wk, *wv, *wo;
  DenseLayer<T> fc1, fc2;
  int heads;

  TransformerLayer(ParamStore<T>& ps, std::mt19937_64& rng, const std::string& prefix, int E,
                   int heads_)
      : heads(heads_) {
    ln1_g = ps.add(prefix + ".ln1.g", detail::ones<T>({E}));
    ln1_b = ps.add(prefix + ".ln1.b", detail::zeros_t<T>({E}));
    wq = ps.add(prefix + ".wq", uniform_init<T>({E, E}, E, rng));
    wk = ps.add(prefix + ".wk", uniform_init<T>({E, E}, E, rng));
    wv = ps.add(prefix + ".wv", uniform_init<T>({E, E}, E, rng));
    wo = ps.add(prefix + ".wo", uniform_init<T>({E, E}, E, rng));
    ln2_g = ps.add(prefix + ".ln2.g", detail::ones<T>({E}));
    ln2_b = ps.add(prefix + ".ln2.b", detail::zeros_t<T>({E}));
    fc1 = DenseLayer<T>(ps, rng, prefix + ".fc1", E, 2 * E);
    fc2 = DenseLayer<T>(ps, rng, prefix + ".fc2", 2 * E, E);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> h = layer_norm(x, ln1_g->value, ln1_b->value);
    Tensor<T> a = multi_head_attention(h, h, h, heads, wq->value, wk->value, wv->value, wo->value);
    Tensor<T> y = add(x, a);
    Tensor<T> m = layer_norm(y, ln2_g->value, ln2_b->value);
    return add(y, fc2.forward(gelu(fc1.forward(m))));
  }
};

template <typename T>
class UNETRModel : public Model<T> {
 public:
  PlainConv<T> patch_embed;
  Parameter<T>* pos_embed;
  std::vector<TransformerLayer<T>> layers;
  PlainConv<T> tap_fuse;                 // 1x1 conv over concatenated taps
  ConvUnit<T> fuse_block;
  std::vector<ConvUnit<T>> up_blocks;    // one per factor-2 upsample
  DoubleConv<T> input_stem;
  DoubleConv<T> merge_block;
  PlainConv<T> head;
  std::array<int, 3> grid{};             // token grid (d, h, w)

  UNETRModel(const ModelSpec& spec, const std::array<int, 3>& dims, std::mt19937_64& rng) {
    this->spec = spec;
    this->input_dims = dims;
    auto& ps = this->store_;
    const int E = spec.embed_dim, p = spec.patch_size;
    grid = {dims[0] / p, dims[1] / p, dims[2] / p};
    const int tokens = grid[0] * grid[1] * grid[2];
    patch_embed = PlainConv<T>(ps, rng, "patch", 1, E, p, p);
    pos_embed = ps.add("pos", uniform_init<T>({1, tokens, E}, E, rng));
    for (int l = 0; l < spec.transformer_layers; ++l)
      layers.emplace_back(ps, rng, "tr" + std::to_string(l), E, spec.heads);
    const int c0 = 4 * spec.base_channels;
    tap_fuse = PlainConv<T>(ps, rng, "tapfuse", E * spec.transformer_layers, c0, 1, 1);
    fuse_block = ConvUnit<T>(ps, rng, "fuseblk", c0, c0);
    int ups = 0;
    for (int q = p; q > 1; q /= 2) ++ups;
    int c = c0;
    for (int u = 0; u < ups; ++u) {
      const int cn = std::max(spec.base_channels, c / 2);
      up_blocks.emplace_back(ps, rng, "up" + std::to_string(u), c, cn);
      c = cn;
    }
    input_stem = DoubleConv<T>(ps, rng, "stem", 1, spec.base_channels);
    merge_block = DoubleConv<T>(ps, rng, "merge", c + spec.base_channels, spec.base_channels);
    head = PlainConv<T>(ps, rng, "head", spec.base_channels, 1, 1, 1, false, 0.01);
  }

  // Token sequences tapped after every transformer layer.
  std::vector<Tensor<T>> encode(const Tensor<T>& x) {
    Tensor<T> tok = add(grid_to_tokens(patch_embed.forward(x)), pos_embed->value);
    std::vector<Tensor<T>> taps;
    for (const auto& layer : layers) {
      tok = layer.forward(tok);
      taps.push_back(tok);
    }
    return taps;
  }

  Tensor<T> forward(const Tensor<T>& x, double, double) override {
    auto taps = encode(x);
    Tensor<T> cat = tokens_to_grid(taps[0], grid[0], grid[1], grid[2]);
    for (size_t i = 1; i < taps.size(); ++i)
      cat = concat_channels(cat, tokens_to_grid(taps[i], grid[0], grid[1], grid[2]));
    Tensor<T> h = fuse_block.forward(tap_fuse.forward(cat));
    for (const auto& ub : up_blocks) h = ub.forward(upsample3d_nearest(h, 2));
    Tensor<T> stem = input_stem.forward(x);
    Tensor<T> merged = merge_block.forward(concat_channels(stem, h));
    return add(x, head.forward(merged));
  }
};

// --- factory / predict / checkpoints ----------------------------------------

template <typename T = float>
std::unique_ptr<Model<T>> build_model(const ModelSpec& spec, const std::array<int, 3>& dims_dhw,
                                      uint64_t seed) {
  spec.validate(dims_dhw);
  std::mt19937_64 rng(seed);
  switch (spec.arch) {
    case Arch::UNet: return std::make_unique<UNetModel<T>>(spec, dims_dhw, rng);
    case Arch::U2Net: return std::make_unique<U2NetModel<T>>(spec, dims_dhw, rng);
    case Arch::UNETR: return std::make_unique<UNETRModel<T>>(spec, dims_dhw, rng);
    case Arch::TEUNet: return std::make_unique<TEUNetModel<T>>(spec, dims_dhw, rng);
    case Arch::OdeUNet: return std::make_unique<OdeUNetModel<T>>(spec, dims_dhw, rng);
  }
  throw std::logic_error("bad arch");
}

// Inference entry point; output clamped to the density range.
template <typename T>
Volume predict(Model<T>& model, const Volume& source, int t1_months, int horizon_months = 24) {
  if (horizon_months < 0) throw std::invalid_argument("predict: non-positive horizon");
  NoGradGuard ng;
  Tensor<T> x = volume_to_tensor<T>(source);
  Tensor<T> y = model.forward(x, t1_months, horizon_months);
  if (y.shape() != x.shape()) throw std::logic_error("predict: model changed output shape");
  Volume out = tensor_to_volume(y, source);
  for (auto& v : out.data) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

// Checkpoint container: magic CKPT, version u32, tag string, then repeated
// (name length u32, name bytes, rank u32, dims u32 x rank, f32 payload).
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CheckpointEntry {
  std::vector<int> shape;
  std::vector<float> values;
};

inline void write_checkpoint_file(const std::string& path, const std::string& tag,
                                  const std::vector<std::pair<std::string, CheckpointEntry>>& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open checkpoint for writing: " + path);
  os.write("CKPT", 4);
  const uint32_t version = 1;
  os.write(reinterpret_cast<const char*>(&version), 4);
  const uint32_t tag_len = static_cast<uint32_t>(tag.size());
  os.write(reinterpret_cast<const char*>(&tag_len), 4);
  os.write(tag.data(), tag_len);
  for (const auto& [name, e] : entries) {
    const uint32_t nl = static_cast<uint32_t>(name.size());
    os.write(reinterpret_cast<const char*>(&nl), 4);
    os.write(name.data(), nl);
    const uint32_t rank = static_cast<uint32_t>(e.shape.size());
    os.write(reinterpret_cast<const char*>(&rank), 4);
    for (int d : e.shape) {
      const uint32_t u = static_cast<uint32_t>(d);
      os.write(reinterpret_cast<const char*>(&u), 4);
    }
    os.write(reinterpret_cast<const char*>(e.values.data()),
             static_cast<std::streamsize>(e.values.size() * sizeof(float)));
  }
  if (!os) throw CheckpointError("checkpoint write failed: " + path);
}

inline std::pair<std::string, std::vector<std::pair<std::string, CheckpointEntry>>>
read_checkpoint_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "CKPT", 4) != 0) throw CheckpointError("bad checkpoint magic in " + path);
  uint32_t version = 0, tag_len = 0;
  is.read(reinterpret_cast<char*>(&version), 4);
  if (version != 1) throw CheckpointError("unsupported checkpoint version");
  is.read(reinterpret_cast<char*>(&tag_len), 4);
  if (!is || tag_len > 4096) throw CheckpointError("bad checkpoint tag");
  std::string tag(tag_len, '\0');
  is.read(tag.data(), tag_len);
  std::vector<std::pair<std::string, CheckpointEntry>> entries;
  while (true) {
    uint32_t nl = 0;
    is.read(reinterpret_cast<char*>(&nl), 4);
    if (is.eof() || is.gcount() == 0) break;
    if (!is || nl > 4096) throw CheckpointError("bad entry name length");
    std::string name(nl, '\0');
    is.read(name.data(), nl);
    uint32_t rank = 0;
    is.read(reinterpret_cast<char*>(&rank), 4);
    if (!is || rank > 8) throw CheckpointError("bad entry rank");
    CheckpointEntry e;
    int64_t n = 1;
    for (uint32_t i = 0; i < rank; ++i) {
      uint32_t d = 0;
      is.read(reinterpret_cast<char*>(&d), 4);
      e.shape.push_back(static_cast<int>(d));
      n *= d;
    }
    if (!is || n <= 0 || n > (int64_t(1) << 31)) throw CheckpointError("bad entry dims");
    e.values.resize(static_cast<size_t>(n));
    is.read(reinterpret_cast<char*>(e.values.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (is.gcount() != static_cast<std::streamsize>(n * sizeof(float)))
      throw CheckpointError("truncated checkpoint entry: " + name);
    entries.emplace_back(std::move(name), std::move(e));
  }
  return {tag, std::move(entries)};
}

inline void save_checkpoint(const Model<float>& model, const std::string& path,
                            bool with_optimizer_state = false) {
  std::vector<std::pair<std::string, CheckpointEntry>> entries;
  for (const Parameter<float>* p : model.all_parameters())
    entries.emplace_back(p->name, CheckpointEntry{p->value.shape(), p->value.values()});
  write_checkpoint_file(path, arch_tag(model.spec.arch), entries);
  if (with_optimizer_state) {
    std::vector<std::pair<std::string, CheckpointEntry>> opt;
    for (const Parameter<float>* p : model.all_parameters()) {
      opt.emplace_back(p->name + ".m", CheckpointEntry{p->value.shape(), p->adam_m});
      opt.emplace_back(p->name + ".v", CheckpointEntry{p->value.shape(), p->adam_v});
      opt.emplace_back(p->name + ".step",
                       CheckpointEntry{{1}, {static_cast<float>(p->step_count)}});
    }
    write_checkpoint_file(path + ".opt", arch_tag(model.spec.arch), opt);
  }
}

inline void load_parameters(Model<float>& model, const std::string& path) {
  auto [tag, entries] = read_checkpoint_file(path);
  if (tag != arch_tag(model.spec.arch))
    throw CheckpointError("architecture tag mismatch: checkpoint is '" + tag + "'");
  std::map<std::string, CheckpointEntry*> by_name;
  for (auto& [name, e] : entries) by_name[name] = &e;
  for (Parameter<float>* p : model.all_parameters()) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) throw CheckpointError("checkpoint missing parameter: " + p->name);
    if (it->second->shape != p->value.shape())
      throw CheckpointError("checkpoint shape mismatch for: " + p->name);
    p->value.values() = it->second->values;
  }
}

// Builds a model matching a checkpoint's tag (default hyperparameters) and
// loads its parameters.
inline std::unique_ptr<Model<float>> load_model(const std::string& path,
                                                const std::array<int, 3>& dims_dhw,
                                                ModelSpec spec_hint = {}) {
  auto [tag, entries] = read_checkpoint_file(path);
  (void)entries;
  spec_hint.arch = arch_from_tag(tag);
  auto model = build_model<float>(spec_hint, dims_dhw, /*seed=*/0);
  load_parameters(*model, path);
  return model;
}

}  // namespace volf
