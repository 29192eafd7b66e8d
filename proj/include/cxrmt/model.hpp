#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <deque>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cxrmt/error.hpp"
#include "cxrmt/ops.hpp"
#include "cxrmt/rng.hpp"

namespace cxrmt {

struct DecoderStage {
  std::size_t factor = 2;
  std::size_t channels = 8;
  bool operator==(const DecoderStage&) const = default;
};

struct ModelConfig {
  std::size_t input_size = 64;  // N
  std::vector<std::size_t> dense_block_sizes{2, 2, 2};
  std::size_t growth_rate = 8;
  std::size_t stem_channels = 16;
  bool stem_pool = true;
  std::size_t bottleneck_width = 0;  // 1x1 conv to width*growth before each 3x3; 0 disables
  double compression = 0.5;          // transition output channels / input channels
  std::size_t num_abnormality_classes = 26;  // D
  std::size_t num_spatial_classes = 9;       // F
  bool with_decoder = true;
  bool with_location_head = true;
  std::vector<DecoderStage> decoder_stages;  // empty: x2 stages, channels halving, until N
  bool zero_init_heads = false;
  std::uint64_t seed = 1;

  bool operator==(const ModelConfig&) const = default;

  std::size_t reduction() const {
    std::size_t r = stem_pool ? 2 : 1;
    for (std::size_t i = 1; i < dense_block_sizes.size(); ++i) r *= 2;
    return r;
  }
};

inline void to_json(nlohmann::json& j, const DecoderStage& s) { j = {{"factor", s.factor}, {"channels", s.channels}}; }
inline void from_json(const nlohmann::json& j, DecoderStage& s) {
  j.at("factor").get_to(s.factor);
  j.at("channels").get_to(s.channels);
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"input_size", c.input_size},
       {"dense_block_sizes", c.dense_block_sizes},
       {"growth_rate", c.growth_rate},
       {"stem_channels", c.stem_channels},
       {"stem_pool", c.stem_pool},
       {"bottleneck_width", c.bottleneck_width},
       {"compression", c.compression},
       {"num_abnormality_classes", c.num_abnormality_classes},
       {"num_spatial_classes", c.num_spatial_classes},
       {"with_decoder", c.with_decoder},
       {"with_location_head", c.with_location_head},
       {"decoder_stages", c.decoder_stages},
       {"zero_init_heads", c.zero_init_heads},
       {"seed", c.seed}};
}

// Missing keys keep their defaults.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  auto opt = [&](const char* k, auto& v) {
    if (j.contains(k)) j.at(k).get_to(v);
  };
  opt("input_size", c.input_size);
  opt("dense_block_sizes", c.dense_block_sizes);
  opt("growth_rate", c.growth_rate);
  opt("stem_channels", c.stem_channels);
  opt("stem_pool", c.stem_pool);
  opt("bottleneck_width", c.bottleneck_width);
  opt("compression", c.compression);
  opt("num_abnormality_classes", c.num_abnormality_classes);
  opt("num_spatial_classes", c.num_spatial_classes);
  opt("with_decoder", c.with_decoder);
  opt("with_location_head", c.with_location_head);
  opt("decoder_stages", c.decoder_stages);
  opt("zero_init_heads", c.zero_init_heads);
  opt("seed", c.seed);
}

// Five dense blocks with 4x bottlenecks: 1 stem + 2*58 + 4 transitions = 121
// convolutions, /32 reduction so a 512 input reaches GAP at 16x16.
inline ModelConfig full_scale_config() {
  ModelConfig c;
  c.input_size = 512;
  c.dense_block_sizes = {6, 12, 24, 12, 4};
  c.growth_rate = 12;
  c.stem_channels = 24;
  c.bottleneck_width = 4;
  return c;
}

struct ModelOutput {
  Tensor abn_logits, abn_probs;  // [B,D]
  Tensor loc_logits, loc_probs;  // [B,F], undefined without the location head
  Tensor seg_logits, seg_map;    // [B,2,N,N], undefined without the decoder
};

struct NamedParam {
  std::string name;
  Tensor value;
};

class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    validate();
    build();
  }

  const ModelConfig& config() const { return cfg_; }
  const std::vector<NamedParam>& params() const { return params_; }
  std::vector<NamedParam>& params() { return params_; }
  std::size_t conv_layer_count() const { return conv_count_; }
  std::size_t encoder_channels() const { return encoder_channels_; }
  std::size_t final_feature_size() const { return cfg_.input_size / cfg_.reduction(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

  // Parameters upstream of the GAP / decoder split.
  bool is_encoder_param(const std::string& name) const {
    return name.rfind("stem.", 0) == 0 || name.rfind("block", 0) == 0 || name.rfind("trans", 0) == 0 ||
           name.rfind("final_bn.", 0) == 0;
  }

  std::vector<double> flat_parameters() const {
    std::vector<double> out;
    for (const auto& p : params_) out.insert(out.end(), p.value.data().begin(), p.value.data().end());
    return out;
  }

  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }

  struct BatchNormLayer {
    std::string name;
    Tensor gamma, beta;
    BatchNormState state;
  };
  const std::deque<BatchNormLayer>& batch_norms() const { return bns_; }
  std::deque<BatchNormLayer>& batch_norms() { return bns_; }

  // images [B,1,N,N] with values in [0,1].
  ModelOutput forward(const Tensor& images, bool training) {
    const std::size_t n = cfg_.input_size;
    if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != n || images.dim(3) != n)
      throw ShapeError("forward: expected [B,1," + std::to_string(n) + "," + std::to_string(n) + "], got " +
                       shape_str(images.shape()));
    const std::size_t batch = images.dim(0);
    if (batch == 0) throw ShapeError("forward: empty batch");
    std::size_t bn = 0, conv = 0;
    auto next_bn = [&](const Tensor& x) {
      auto& l = bns_[bn++];
      return batch_norm(x, l.gamma, l.beta, l.state, training);
    };
    auto next_conv = [&](const Tensor& x, std::size_t pad) {
      const auto& c = convs_[conv++];
      return conv2d(x, c.weight, c.bias, {1, pad});
    };

    Tensor x = channel_concat({images, images, images});
    x = relu(next_bn(next_conv(x, 1)));
    if (cfg_.stem_pool) x = avg_pool(x, 2);
    for (std::size_t b = 0; b < cfg_.dense_block_sizes.size(); ++b) {
      for (std::size_t l = 0; l < cfg_.dense_block_sizes[b]; ++l) {
        Tensor h = relu(next_bn(x));
        if (cfg_.bottleneck_width) h = relu(next_bn(next_conv(h, 0)));
        h = next_conv(h, 1);
        x = channel_concat({x, h});
      }
      if (b + 1 < cfg_.dense_block_sizes.size()) x = avg_pool(next_conv(next_bn(x), 0), 2);
    }
    const Tensor features = relu(next_bn(x));

    ModelOutput out;
    const Tensor pooled = global_avg_pool(features);
    out.abn_logits = dense(pooled, abn_w_, abn_b_);
    out.abn_probs = sigmoid(out.abn_logits);
    if (cfg_.with_location_head) {
      out.loc_logits = dense(pooled, loc_w_, loc_b_);
      out.loc_probs = sigmoid(out.loc_logits);
    }
    if (cfg_.with_decoder) {
      Tensor d = features;
      for (const auto& s : decoder_plan_) d = relu(next_bn(next_conv(upsample_nearest(d, s.factor), 1)));
      out.seg_logits = next_conv(d, 0);
      out.seg_map = sigmoid(out.seg_logits);
    }
    (void)batch;
    return out;
  }

  // Inference without graph bookkeeping, using running statistics.
  ModelOutput predict(const Tensor& images) {
    NoGradGuard guard;
    return forward(images, false);
  }

 private:
  struct ConvParams {
    Tensor weight, bias;
  };

  void validate() const {
    const auto& c = cfg_;
    if (c.dense_block_sizes.empty()) throw ConfigError("model: at least one dense block required");
    for (auto s : c.dense_block_sizes)
      if (s == 0) throw ConfigError("model: dense blocks need at least one layer");
    if (c.growth_rate == 0 || c.stem_channels == 0) throw ConfigError("model: channel counts must be positive");
    if (!(c.compression > 0.0 && c.compression <= 1.0)) throw ConfigError("model: compression must lie in (0,1]");
    if (c.num_abnormality_classes == 0) throw ConfigError("model: D must be positive");
    if (c.with_location_head && c.num_spatial_classes == 0) throw ConfigError("model: F must be positive");
    if (c.input_size == 0 || c.input_size % c.reduction() != 0)
      throw ConfigError("model: input size " + std::to_string(c.input_size) + " is not divisible by the encoder reduction " +
                        std::to_string(c.reduction()));
    if (c.with_decoder) {
      std::size_t s = c.input_size / c.reduction();
      for (const auto& st : c.decoder_stages) {
        if (st.factor == 0 || st.channels == 0) throw ConfigError("model: decoder stage needs factor and channels");
        s *= st.factor;
      }
      if (!c.decoder_stages.empty() && s != c.input_size)
        throw ConfigError("model: decoder stages end at " + std::to_string(s) + ", not the input size");
    }
  }

  Tensor init_uniform(const std::string& name, Shape shape, std::size_t fan_in, bool zero = false) {
    std::vector<double> v(shape_numel(shape), 0.0);
    if (!zero) {
      Rng rng(derive_seed(cfg_.seed, name));
      const double bound = std::sqrt(6.0 / double(fan_in));
      for (auto& x : v) x = rng.uniform(-bound, bound);
    }
    Tensor t = Tensor::from(std::move(shape), std::move(v), true);
    params_.push_back({name, t});
    return t;
  }

  Tensor init_const(const std::string& name, Shape shape, double value) {
    Tensor t = Tensor::full(std::move(shape), value, true);
    params_.push_back({name, t});
    return t;
  }

  void add_conv(const std::string& name, std::size_t in, std::size_t out, std::size_t k, bool bias, bool zero = false) {
    ConvParams c;
    c.weight = init_uniform(name + ".weight", {out, in, k, k}, in * k * k, zero);
    if (bias) c.bias = init_const(name + ".bias", {out}, 0.0);
    convs_.push_back(c);
    ++conv_count_;
  }

  void add_bn(const std::string& name, std::size_t channels) {
    BatchNormLayer l;
    l.name = name;
    l.gamma = init_const(name + ".gamma", {channels}, 1.0);
    l.beta = init_const(name + ".beta", {channels}, 0.0);
    l.state = BatchNormState(channels);
    bns_.push_back(std::move(l));
  }

  // Registration order mirrors forward() so the two walk convs_/bns_ in step.
  void build() {
    const auto& c = cfg_;
    add_conv("stem.conv", 3, c.stem_channels, 3, false);
    add_bn("stem.bn", c.stem_channels);
    std::size_t ch = c.stem_channels;
    for (std::size_t b = 0; b < c.dense_block_sizes.size(); ++b) {
      for (std::size_t l = 0; l < c.dense_block_sizes[b]; ++l) {
        const std::string p = "block" + std::to_string(b + 1) + ".layer" + std::to_string(l + 1);
        add_bn(p + ".bn1", ch);
        std::size_t in = ch;
        if (c.bottleneck_width) {
          in = c.bottleneck_width * c.growth_rate;
          add_conv(p + ".conv1", ch, in, 1, false);
          add_bn(p + ".bn2", in);
        }
        add_conv(p + ".conv2", in, c.growth_rate, 3, false);
        ch += c.growth_rate;
      }
      if (b + 1 < c.dense_block_sizes.size()) {
        const std::string p = "trans" + std::to_string(b + 1);
        const auto out = std::max<std::size_t>(1, std::size_t(std::floor(double(ch) * c.compression)));
        add_bn(p + ".bn", ch);
        add_conv(p + ".conv", ch, out, 1, false);
        ch = out;
      }
    }
    add_bn("final_bn", ch);
    encoder_channels_ = ch;

    abn_w_ = init_uniform("abn_head.weight", {c.num_abnormality_classes, ch}, ch, c.zero_init_heads);
    abn_b_ = init_const("abn_head.bias", {c.num_abnormality_classes}, 0.0);
    if (c.with_location_head) {
      loc_w_ = init_uniform("loc_head.weight", {c.num_spatial_classes, ch}, ch, c.zero_init_heads);
      loc_b_ = init_const("loc_head.bias", {c.num_spatial_classes}, 0.0);
    }
    if (c.with_decoder) {
      decoder_plan_ = c.decoder_stages;
      if (decoder_plan_.empty()) {
        std::size_t s = final_feature_size(), width = ch;
        while (s < c.input_size) {
          width = std::max<std::size_t>(4, width / 2);
          decoder_plan_.push_back({2, width});
          s *= 2;
        }
      }
      std::size_t in = ch;
      for (std::size_t i = 0; i < decoder_plan_.size(); ++i) {
        const std::string p = "decoder.stage" + std::to_string(i + 1);
        add_conv(p + ".conv", in, decoder_plan_[i].channels, 3, false);
        add_bn(p + ".bn", decoder_plan_[i].channels);
        in = decoder_plan_[i].channels;
      }
      add_conv("decoder.out", in, 2, 1, true, c.zero_init_heads);
    }
  }

  ModelConfig cfg_;
  std::vector<NamedParam> params_;
  std::vector<ConvParams> convs_;
  std::deque<BatchNormLayer> bns_;
  std::vector<DecoderStage> decoder_plan_;
  Tensor abn_w_, abn_b_, loc_w_, loc_b_;
  std::size_t conv_count_ = 0;
  std::size_t encoder_channels_ = 0;
};

inline Model build_model(const ModelConfig& cfg) { return Model(cfg); }

// Images [B,1,N,N] from row-major N*N pixel buffers.
inline Tensor make_image_batch(const std::vector<const std::vector<double>*>& images, std::size_t n) {
  std::vector<double> data;
  data.reserve(images.size() * n * n);
  for (const auto* img : images) {
    if (img->size() != n * n) throw ShapeError("make_image_batch: image does not match the model input size");
    data.insert(data.end(), img->begin(), img->end());
  }
  return Tensor::from({images.size(), 1, n, n}, std::move(data));
}

// Checkpoint layout (little endian):
//   "CXRMTCKP" | u32 version | u64 len | config JSON
//   u64 tensor count | per tensor: u32 name len, name, u32 rank, u64 dims[rank], f64 values
//   u64 bn count     | per layer:  u32 name len, name, u64 C, f64 running_mean[C], f64 running_var[C]
inline constexpr char kCheckpointMagic[8] = {'C', 'X', 'R', 'M', 'T', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace ckpt {

inline void put_u64(std::ostream& o, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = char((v >> (8 * i)) & 0xff);
  o.write(b, 8);
}
inline void put_u32(std::ostream& o, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = char((v >> (8 * i)) & 0xff);
  o.write(b, 4);
}
inline void put_f64(std::ostream& o, double v) { put_u64(o, std::bit_cast<std::uint64_t>(v)); }
inline void put_str(std::ostream& o, const std::string& s) {
  put_u32(o, std::uint32_t(s.size()));
  o.write(s.data(), std::streamsize(s.size()));
}

struct Reader {
  std::istream& in;
  std::string file;
  void raw(char* p, std::size_t n) {
    if (!in.read(p, std::streamsize(n))) throw Error(file + ": truncated checkpoint");
  }
  std::uint64_t u64() {
    unsigned char b[8];
    raw(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  std::uint32_t u32() {
    unsigned char b[4];
    raw(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str(std::size_t limit = 1u << 20) {
    const auto n = u32();
    if (n > limit) throw Error(file + ": implausible string length in checkpoint");
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
};

}  // namespace ckpt

inline void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream o(path, std::ios::binary);
  if (!o) throw Error("cannot write " + path.string());
  o.write(kCheckpointMagic, 8);
  ckpt::put_u32(o, kCheckpointVersion);
  const std::string cfg = nlohmann::json(model.config()).dump();
  ckpt::put_u64(o, cfg.size());
  o.write(cfg.data(), std::streamsize(cfg.size()));
  ckpt::put_u64(o, model.params().size());
  for (const auto& p : model.params()) {
    ckpt::put_str(o, p.name);
    ckpt::put_u32(o, std::uint32_t(p.value.rank()));
    for (auto d : p.value.shape()) ckpt::put_u64(o, d);
    for (double v : p.value.data()) ckpt::put_f64(o, v);
  }
  ckpt::put_u64(o, model.batch_norms().size());
  for (const auto& l : model.batch_norms()) {
    ckpt::put_str(o, l.name);
    ckpt::put_u64(o, l.state.running_mean.size());
    for (double v : l.state.running_mean) ckpt::put_f64(o, v);
    for (double v : l.state.running_var) ckpt::put_f64(o, v);
  }
  if (!o) throw Error("failed writing " + path.string());
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  ckpt::Reader r{in, path.string()};
  char magic[8];
  r.raw(magic, 8);
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0) throw Error(r.file + ": not a checkpoint");
  const auto version = r.u32();
  if (version != kCheckpointVersion) throw Error(r.file + ": unsupported checkpoint version " + std::to_string(version));
  const auto len = r.u64();
  if (len > (1u << 24)) throw Error(r.file + ": implausible config length");
  std::string cfg_text(len, '\0');
  r.raw(cfg_text.data(), len);
  ModelConfig cfg;
  try {
    cfg = nlohmann::json::parse(cfg_text).get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(r.file + ": bad config echo: " + e.what());
  }
  Model model(cfg);
  auto& params = model.params();
  if (r.u64() != params.size()) throw Error(r.file + ": parameter count does not match the config");
  for (auto& p : params) {
    if (r.str() != p.name) throw Error(r.file + ": parameter order mismatch at " + p.name);
    const auto rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    if (shape != p.value.shape()) throw Error(r.file + ": shape mismatch for " + p.name);
    for (auto& v : p.value.mutable_data()) v = r.f64();
  }
  auto& bns = model.batch_norms();
  if (r.u64() != bns.size()) throw Error(r.file + ": batch-norm count does not match the config");
  for (auto& l : bns) {
    if (r.str() != l.name) throw Error(r.file + ": batch-norm order mismatch at " + l.name);
    if (r.u64() != l.state.running_mean.size()) throw Error(r.file + ": batch-norm size mismatch for " + l.name);
    for (auto& v : l.state.running_mean) v = r.f64();
    for (auto& v : l.state.running_var) v = r.f64();
  }
  return model;
}

}  // namespace cxrmt
