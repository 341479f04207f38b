#pragma once

// Composite layers: instance normalization, AdaIN, residual blocks, the
// style MLP, and strided up/down sampling blocks.

#include <cstdint>
#include <string>
#include <vector>

#include "glyphgen/optim.hpp"
#include "glyphgen/rng.hpp"
#include "glyphgen/tensor.hpp"

namespace glyphgen {

inline constexpr double kNormEps = 1e-5;

inline std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

template <class S>
TensorT<S> he_normal(Shape shape, std::int64_t fan_in, std::uint64_t seed,
                     const std::string& name) {
  Rng rng = Rng::stream(seed, rng_stream::kParamInit, name_hash(name));
  const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<S> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = static_cast<S>(rng.normal() * std_dev);
  return TensorT<S>(std::move(shape), std::move(v));
}

// Per (sample, channel) standardization over spatial positions. No learned
// affine; scale/shift is AdaIN's or a conv bias's job.
template <class S>
TensorT<S> instance_norm(const TensorT<S>& x, double eps = kNormEps) {
  if (x.rank() != 4) shape_error("instance_norm: expected [N,C,H,W], got " + shape_str(x.shape()));
  auto mu = reduce_mean(x, {2, 3});
  auto v = reduce_var(x, {2, 3});
  return (x - mu) / sqrt(v + TensorT<S>::scalar(static_cast<S>(eps)));
}

// Per-channel modulation parameters, [C] or per-sample [N,C].
template <class S>
struct AdaINParamsT {
  TensorT<S> gamma;
  TensorT<S> beta;
};

using AdaINParams = AdaINParamsT<float>;

template <class S>
TensorT<S> adain(const TensorT<S>& x, const AdaINParamsT<S>& p, double eps = kNormEps) {
  if (x.rank() != 4) shape_error("adain: expected [N,C,H,W], got " + shape_str(x.shape()));
  const int c = x.dim(1);
  auto as_map = [&](const TensorT<S>& t, const char* which) {
    if (t.rank() == 1) {
      if (t.dim(0) != c) {
        shape_error(std::string("adain: ") + which + " " + shape_str(t.shape()) +
                    " does not match " + std::to_string(c) + " channels");
      }
      return reshape(t, {1, c, 1, 1});
    }
    if (t.rank() == 2) {
      if (t.dim(0) != x.dim(0) || t.dim(1) != c) {
        shape_error(std::string("adain: ") + which + " " + shape_str(t.shape()) +
                    " does not match input " + shape_str(x.shape()));
      }
      return reshape(t, {x.dim(0), c, 1, 1});
    }
    shape_error(std::string("adain: ") + which + " must be [C] or [N,C], got " +
                shape_str(t.shape()));
  };
  return as_map(p.gamma, "gamma") * instance_norm(x, eps) + as_map(p.beta, "beta");
}

// ---------------------------------------------------------------------------
// Parameterized layers
// ---------------------------------------------------------------------------

template <class S>
struct Conv2dT {
  ParamPtr<S> weight;  // [F,C,kh,kw]
  ParamPtr<S> bias;    // [F]
  int stride = 1;
  int pad = 0;

  static Conv2dT create(ParamStoreT<S>& store, const std::string& name, int in_ch, int out_ch,
                        int kernel, int stride, int pad, std::uint64_t seed) {
    Conv2dT layer;
    layer.weight = store.create(
        name + ".weight",
        he_normal<S>({out_ch, in_ch, kernel, kernel},
                     static_cast<std::int64_t>(in_ch) * kernel * kernel, seed, name + ".weight"));
    layer.bias = store.create(name + ".bias", TensorT<S>::zeros({out_ch}));
    layer.stride = stride;
    layer.pad = pad;
    return layer;
  }

  TensorT<S> forward(TapeT<S>& tape, const TensorT<S>& x) const {
    return conv2d(x, tape.leaf(weight->value), tape.leaf(bias->value), stride, pad);
  }
};

template <class S>
struct ConvTranspose2dT {
  ParamPtr<S> weight;  // [C,F,kh,kw]
  ParamPtr<S> bias;    // [F]
  int stride = 1;
  int pad = 0;

  static ConvTranspose2dT create(ParamStoreT<S>& store, const std::string& name, int in_ch,
                                 int out_ch, int kernel, int stride, int pad,
                                 std::uint64_t seed) {
    ConvTranspose2dT layer;
    layer.weight = store.create(
        name + ".weight",
        he_normal<S>({in_ch, out_ch, kernel, kernel},
                     static_cast<std::int64_t>(in_ch) * kernel * kernel, seed, name + ".weight"));
    layer.bias = store.create(name + ".bias", TensorT<S>::zeros({out_ch}));
    layer.stride = stride;
    layer.pad = pad;
    return layer;
  }

  TensorT<S> forward(TapeT<S>& tape, const TensorT<S>& x) const {
    return conv_transpose2d(x, tape.leaf(weight->value), tape.leaf(bias->value), stride, pad);
  }
};

template <class S>
struct LinearT {
  ParamPtr<S> weight;  // [in,out]
  ParamPtr<S> bias;    // [out]

  static LinearT create(ParamStoreT<S>& store, const std::string& name, int in_dim, int out_dim,
                        std::uint64_t seed) {
    LinearT layer;
    layer.weight = store.create(name + ".weight",
                                he_normal<S>({in_dim, out_dim}, in_dim, seed, name + ".weight"));
    layer.bias = store.create(name + ".bias", TensorT<S>::zeros({out_dim}));
    return layer;
  }

  TensorT<S> forward(TapeT<S>& tape, const TensorT<S>& x) const {
    return matmul(x, tape.leaf(weight->value)) + tape.leaf(bias->value);
  }
};

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

enum class NormKind { Instance, Adaptive };

// x + conv-norm-relu-conv-norm branch; input and output shapes equal.
template <class S>
struct ResidualBlockT {
  Conv2dT<S> conv1, conv2;
  NormKind norm = NormKind::Instance;
  int channels = 0;

  static ResidualBlockT create(ParamStoreT<S>& store, const std::string& name, int channels,
                               int kernel, NormKind norm, std::uint64_t seed) {
    ResidualBlockT block;
    block.conv1 = Conv2dT<S>::create(store, name + ".conv1", channels, channels, kernel, 1,
                                     kernel / 2, seed);
    block.conv2 = Conv2dT<S>::create(store, name + ".conv2", channels, channels, kernel, 1,
                                     kernel / 2, seed);
    block.norm = norm;
    block.channels = channels;
    return block;
  }

  TensorT<S> forward(TapeT<S>& tape, const TensorT<S>& x) const {
    if (norm != NormKind::Instance) {
      throw std::logic_error("residual block: adaptive norm requires style parameters");
    }
    auto h = instance_norm(conv1.forward(tape, x));
    h = relu(h);
    h = instance_norm(conv2.forward(tape, h));
    return x + h;
  }

  TensorT<S> forward(TapeT<S>& tape, const TensorT<S>& x, const AdaINParamsT<S>& site1,
                     const AdaINParamsT<S>& site2) const {
    if (norm != NormKind::Adaptive) {
      throw std::logic_error("residual block: style parameters given to an instance-norm block");
    }
    auto h = adain(conv1.forward(tape, x), site1);
    h = relu(h);
    h = adain(conv2.forward(tape, h), site2);
    return x + h;
  }
};

// Fully connected stack: relu between hidden layers, linear output.
template <class S>
struct MlpT {
  std::vector<LinearT<S>> layers;
  std::vector<int> widths;  // including input and output

  static MlpT create(ParamStoreT<S>& store, const std::string& name,
                     const std::vector<int>& widths, std::uint64_t seed) {
    if (widths.size() < 2) throw std::invalid_argument("mlp: need at least input and output widths");
    MlpT mlp;
    mlp.widths = widths;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      mlp.layers.push_back(LinearT<S>::create(store, name + ".fc" + std::to_string(i + 1),
                                              widths[i], widths[i + 1], seed));
    }
    return mlp;
  }

  TensorT<S> forward(TapeT<S>& tape, const TensorT<S>& z) const {
    if (z.rank() != 2 || z.dim(1) != widths.front()) {
      shape_error("mlp: input " + shape_str(z.shape()) + " does not match width " +
                  std::to_string(widths.front()));
    }
    TensorT<S> h = z;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      h = layers[i].forward(tape, h);
      if (i + 1 < layers.size()) h = relu(h);
    }
    return h;
  }
};

// Split a raw MLP output [N, 2 * sum(channels)] into per-site modulation
// parameters, sites in generator layer order, each site laid out as
// [gamma_raw(C), beta(C)]. Gamma is centered at 1: a zero MLP output means
// identity modulation.
template <class S>
std::vector<AdaINParamsT<S>> split_adain_params(const TensorT<S>& raw,
                                                const std::vector<int>& site_channels) {
  int total = 0;
  for (int c : site_channels) total += 2 * c;
  if (raw.rank() != 2 || raw.dim(1) != total) {
    shape_error("split_adain_params: raw " + shape_str(raw.shape()) + " does not provide " +
                std::to_string(total) + " values");
  }
  std::vector<AdaINParamsT<S>> out;
  int off = 0;
  for (int c : site_channels) {
    auto gamma_raw = slice(raw, 1, off, c);
    auto beta = slice(raw, 1, off + c, c);
    out.push_back(AdaINParamsT<S>{gamma_raw + 1.0, beta});
    off += 2 * c;
  }
  return out;
}

// Stride-2 conv, instance norm, relu; halves H and W.
template <class S>
struct DownsampleBlockT {
  Conv2dT<S> conv;

  static DownsampleBlockT create(ParamStoreT<S>& store, const std::string& name, int in_ch,
                                 int out_ch, std::uint64_t seed) {
    return DownsampleBlockT{Conv2dT<S>::create(store, name + ".conv", in_ch, out_ch, 4, 2, 1, seed)};
  }

  TensorT<S> forward(TapeT<S>& tape, const TensorT<S>& x) const {
    if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) {
      shape_error("downsample: spatial dims of " + shape_str(x.shape()) + " must be even");
    }
    return relu(instance_norm(conv.forward(tape, x)));
  }
};

// Stride-2 transposed conv, instance norm, relu; doubles H and W.
template <class S>
struct UpsampleBlockT {
  ConvTranspose2dT<S> conv;

  static UpsampleBlockT create(ParamStoreT<S>& store, const std::string& name, int in_ch,
                               int out_ch, std::uint64_t seed) {
    return UpsampleBlockT{
        ConvTranspose2dT<S>::create(store, name + ".conv", in_ch, out_ch, 4, 2, 1, seed)};
  }

  TensorT<S> forward(TapeT<S>& tape, const TensorT<S>& x) const {
    return relu(instance_norm(conv.forward(tape, x)));
  }
};

}  // namespace glyphgen
