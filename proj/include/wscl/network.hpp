#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wscl/errors.hpp"
#include "wscl/random.hpp"
#include "wscl/tensor.hpp"

namespace wscl {

// A parameterized (or parameter-free) layer. Layers are immutable: their
// weights live in the owning Network's flat parameter vector and are passed
// in as spans, so networks copy cheaply and a layer object can be shared.
class Layer {
 public:
  virtual ~Layer() = default;

  virtual std::string name() const = 0;
  virtual Shape input_shape() const = 0;
  virtual Shape output_shape() const = 0;
  virtual std::size_t param_count() const { return 0; }
  virtual void init(std::span<double> /*params*/, Rng& /*rng*/) const {}

  virtual Tensor forward(const Tensor& in, std::span<const double> params) const = 0;

  // Returns dL/d(in); accumulates dL/d(params) into grad_params.
  virtual Tensor backward(const Tensor& in, const Tensor& out, const Tensor& grad_out,
                          std::span<const double> params, std::span<double> grad_params) const = 0;

 protected:
  static Shape batch_shape(std::size_t batch, const Shape& row) {
    Shape s{batch};
    s.insert(s.end(), row.begin(), row.end());
    return s;
  }
};

// y = W x + b over the flattened row. W is stored (out, in) row-major, then b.
class Linear final : public Layer {
 public:
  Linear(std::size_t in, std::size_t out) : in_(in), out_(out) {}

  std::string name() const override { return "linear(" + std::to_string(in_) + "->" + std::to_string(out_) + ")"; }
  Shape input_shape() const override { return {in_}; }
  Shape output_shape() const override { return {out_}; }
  std::size_t param_count() const override { return out_ * in_ + out_; }

  void init(std::span<double> params, Rng& rng) const override {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_));
    for (double& p : params) p = (2.0 * rng.uniform() - 1.0) * bound;
  }

  Tensor forward(const Tensor& in, std::span<const double> params) const override {
    const std::size_t batch = in.rows();
    Tensor out({batch, out_});
    const double* w = params.data();
    const double* b = params.data() + out_ * in_;
    for (std::size_t n = 0; n < batch; ++n) {
      const double* x = in.row(n).data();
      double* y = out.row(n).data();
      for (std::size_t o = 0; o < out_; ++o) {
        const double* wr = w + o * in_;
        double acc = b[o];
        for (std::size_t i = 0; i < in_; ++i) acc += wr[i] * x[i];
        y[o] = acc;
      }
    }
    return out;
  }

  Tensor backward(const Tensor& in, const Tensor& /*out*/, const Tensor& grad_out, std::span<const double> params,
                  std::span<double> grad_params) const override {
    const std::size_t batch = in.rows();
    Tensor grad_in(in.shape());
    const double* w = params.data();
    double* gw = grad_params.data();
    double* gb = grad_params.data() + out_ * in_;
    for (std::size_t n = 0; n < batch; ++n) {
      const double* x = in.row(n).data();
      const double* g = grad_out.row(n).data();
      double* gx = grad_in.row(n).data();
      for (std::size_t o = 0; o < out_; ++o) {
        const double go = g[o];
        if (go == 0.0) continue;
        gb[o] += go;
        double* gwr = gw + o * in_;
        const double* wr = w + o * in_;
        for (std::size_t i = 0; i < in_; ++i) {
          gwr[i] += go * x[i];
          gx[i] += go * wr[i];
        }
      }
    }
    return grad_in;
  }

 private:
  std::size_t in_, out_;
};

class Relu final : public Layer {
 public:
  explicit Relu(Shape shape) : shape_(std::move(shape)) {}

  std::string name() const override { return "relu"; }
  Shape input_shape() const override { return shape_; }
  Shape output_shape() const override { return shape_; }

  Tensor forward(const Tensor& in, std::span<const double>) const override {
    Tensor out = in;
    for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
    return out;
  }

  Tensor backward(const Tensor& in, const Tensor&, const Tensor& grad_out, std::span<const double>,
                  std::span<double>) const override {
    Tensor grad_in = grad_out;
    auto x = in.values();
    auto g = grad_in.values();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] <= 0.0) g[i] = 0.0;
    return grad_in;
  }

 private:
  Shape shape_;
};

// 3x3 convolution, stride 1, zero padding 1, over (C, H, W) rows.
class Conv3x3 final : public Layer {
 public:
  Conv3x3(std::size_t in_channels, std::size_t out_channels, std::size_t height, std::size_t width)
      : cin_(in_channels), cout_(out_channels), h_(height), w_(width) {}

  std::string name() const override { return "conv3x3(" + std::to_string(cin_) + "->" + std::to_string(cout_) + ")"; }
  Shape input_shape() const override { return {cin_, h_, w_}; }
  Shape output_shape() const override { return {cout_, h_, w_}; }
  std::size_t param_count() const override { return cout_ * cin_ * 9 + cout_; }

  void init(std::span<double> params, Rng& rng) const override {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin_ * 9));
    for (double& p : params) p = (2.0 * rng.uniform() - 1.0) * bound;
  }

  Tensor forward(const Tensor& in, std::span<const double> params) const override {
    const std::size_t batch = in.rows();
    Tensor out(batch_shape(batch, output_shape()));
    const double* bias = params.data() + cout_ * cin_ * 9;
    for (std::size_t n = 0; n < batch; ++n) {
      const double* x = in.row(n).data();
      double* y = out.row(n).data();
      for (std::size_t co = 0; co < cout_; ++co) {
        double* yc = y + co * h_ * w_;
        for (std::size_t p = 0; p < h_ * w_; ++p) yc[p] = bias[co];
        for (std::size_t ci = 0; ci < cin_; ++ci) {
          const double* k = params.data() + (co * cin_ + ci) * 9;
          const double* xc = x + ci * h_ * w_;
          for (std::size_t r = 0; r < h_; ++r)
            for (std::size_t c = 0; c < w_; ++c) {
              double acc = 0.0;
              for (int dr = -1; dr <= 1; ++dr) {
                const auto rr = static_cast<std::ptrdiff_t>(r) + dr;
                if (rr < 0 || rr >= static_cast<std::ptrdiff_t>(h_)) continue;
                for (int dc = -1; dc <= 1; ++dc) {
                  const auto cc = static_cast<std::ptrdiff_t>(c) + dc;
                  if (cc < 0 || cc >= static_cast<std::ptrdiff_t>(w_)) continue;
                  acc += k[(dr + 1) * 3 + (dc + 1)] * xc[rr * static_cast<std::ptrdiff_t>(w_) + cc];
                }
              }
              yc[r * w_ + c] += acc;
            }
        }
      }
    }
    return out;
  }

  Tensor backward(const Tensor& in, const Tensor&, const Tensor& grad_out, std::span<const double> params,
                  std::span<double> grad_params) const override {
    const std::size_t batch = in.rows();
    Tensor grad_in(in.shape());
    double* gbias = grad_params.data() + cout_ * cin_ * 9;
    for (std::size_t n = 0; n < batch; ++n) {
      const double* x = in.row(n).data();
      const double* g = grad_out.row(n).data();
      double* gx = grad_in.row(n).data();
      for (std::size_t co = 0; co < cout_; ++co) {
        const double* gc = g + co * h_ * w_;
        for (std::size_t p = 0; p < h_ * w_; ++p) gbias[co] += gc[p];
        for (std::size_t ci = 0; ci < cin_; ++ci) {
          const double* k = params.data() + (co * cin_ + ci) * 9;
          double* gk = grad_params.data() + (co * cin_ + ci) * 9;
          const double* xc = x + ci * h_ * w_;
          double* gxc = gx + ci * h_ * w_;
          for (std::size_t r = 0; r < h_; ++r)
            for (std::size_t c = 0; c < w_; ++c) {
              const double go = gc[r * w_ + c];
              if (go == 0.0) continue;
              for (int dr = -1; dr <= 1; ++dr) {
                const auto rr = static_cast<std::ptrdiff_t>(r) + dr;
                if (rr < 0 || rr >= static_cast<std::ptrdiff_t>(h_)) continue;
                for (int dc = -1; dc <= 1; ++dc) {
                  const auto cc = static_cast<std::ptrdiff_t>(c) + dc;
                  if (cc < 0 || cc >= static_cast<std::ptrdiff_t>(w_)) continue;
                  const auto idx = rr * static_cast<std::ptrdiff_t>(w_) + cc;
                  gk[(dr + 1) * 3 + (dc + 1)] += go * xc[idx];
                  gxc[idx] += go * k[(dr + 1) * 3 + (dc + 1)];
                }
              }
            }
        }
      }
    }
    return grad_in;
  }

 private:
  std::size_t cin_, cout_, h_, w_;
};

// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
class AvgPool2 final : public Layer {
 public:
  AvgPool2(std::size_t channels, std::size_t height, std::size_t width) : c_(channels), h_(height), w_(width) {}

  std::string name() const override { return "avgpool2"; }
  Shape input_shape() const override { return {c_, h_, w_}; }
  Shape output_shape() const override { return {c_, h_ / 2, w_ / 2}; }

  Tensor forward(const Tensor& in, std::span<const double>) const override {
    const std::size_t oh = h_ / 2, ow = w_ / 2;
    Tensor out(batch_shape(in.rows(), output_shape()));
    for (std::size_t n = 0; n < in.rows(); ++n) {
      const double* x = in.row(n).data();
      double* y = out.row(n).data();
      for (std::size_t ch = 0; ch < c_; ++ch)
        for (std::size_t r = 0; r < oh; ++r)
          for (std::size_t c = 0; c < ow; ++c) {
            const double* base = x + ch * h_ * w_ + 2 * r * w_ + 2 * c;
            y[ch * oh * ow + r * ow + c] = 0.25 * (base[0] + base[1] + base[w_] + base[w_ + 1]);
          }
    }
    return out;
  }

  Tensor backward(const Tensor& in, const Tensor&, const Tensor& grad_out, std::span<const double>,
                  std::span<double>) const override {
    const std::size_t oh = h_ / 2, ow = w_ / 2;
    Tensor grad_in(in.shape());
    for (std::size_t n = 0; n < in.rows(); ++n) {
      const double* g = grad_out.row(n).data();
      double* gx = grad_in.row(n).data();
      for (std::size_t ch = 0; ch < c_; ++ch)
        for (std::size_t r = 0; r < oh; ++r)
          for (std::size_t c = 0; c < ow; ++c) {
            const double go = 0.25 * g[ch * oh * ow + r * ow + c];
            double* base = gx + ch * h_ * w_ + 2 * r * w_ + 2 * c;
            base[0] += go;
            base[1] += go;
            base[w_] += go;
            base[w_ + 1] += go;
          }
    }
    return grad_in;
  }

 private:
  std::size_t c_, h_, w_;
};

// Which intermediate output serves as the feature embedding.
enum class EmbeddingSource { logits, penultimate };

// Sequential classifier. Parameters of all layers are packed into one flat
// vector (theta) in layer order; gradients use the same layout.
class Network {
 public:
  struct Output {
    Tensor logits;
    Tensor embedding;
  };

  Network() = default;

  Network(Shape input_shape, std::vector<std::shared_ptr<const Layer>> layers,
          EmbeddingSource embedding = EmbeddingSource::logits)
      : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
    if (layers_.empty()) throw ConfigError("network needs at least one layer");
    if (shape_volume(layers_.front()->input_shape()) != shape_volume(input_shape_))
      throw ConfigError("first layer expects " + shape_string(layers_.front()->input_shape()) + ", input is " +
                        shape_string(input_shape_));
    std::size_t total = 0;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (i > 0 && shape_volume(layers_[i]->input_shape()) != shape_volume(layers_[i - 1]->output_shape()))
        throw ConfigError("layer " + std::to_string(i) + " (" + layers_[i]->name() + ") input does not match " +
                          layers_[i - 1]->name() + " output");
      offsets_.push_back(total);
      total += layers_[i]->param_count();
    }
    params_.assign(total, 0.0);
    set_embedding(embedding);
  }

  // Input -> [Linear -> ReLU] * hidden -> Linear(num_classes).
  static Network mlp(std::size_t input_dim, const std::vector<std::size_t>& hidden, std::size_t num_classes,
                     EmbeddingSource embedding = EmbeddingSource::logits) {
    std::vector<std::shared_ptr<const Layer>> layers;
    std::size_t prev = input_dim;
    for (std::size_t h : hidden) {
      layers.push_back(std::make_shared<Linear>(prev, h));
      layers.push_back(std::make_shared<Relu>(Shape{h}));
      prev = h;
    }
    layers.push_back(std::make_shared<Linear>(prev, num_classes));
    return Network({input_dim}, std::move(layers), embedding);
  }

  // Two conv blocks (conv3x3 -> ReLU -> avgpool) followed by an MLP head.
  static Network conv(std::size_t channels, std::size_t height, std::size_t width, std::size_t conv_channels,
                      const std::vector<std::size_t>& hidden, std::size_t num_classes,
                      EmbeddingSource embedding = EmbeddingSource::logits) {
    std::vector<std::shared_ptr<const Layer>> layers;
    std::size_t c = channels, h = height, w = width;
    for (int block = 0; block < 2; ++block) {
      layers.push_back(std::make_shared<Conv3x3>(c, conv_channels, h, w));
      layers.push_back(std::make_shared<Relu>(Shape{conv_channels, h, w}));
      layers.push_back(std::make_shared<AvgPool2>(conv_channels, h, w));
      c = conv_channels;
      h /= 2;
      w /= 2;
    }
    std::size_t prev = c * h * w;
    for (std::size_t hd : hidden) {
      layers.push_back(std::make_shared<Linear>(prev, hd));
      layers.push_back(std::make_shared<Relu>(Shape{hd}));
      prev = hd;
    }
    layers.push_back(std::make_shared<Linear>(prev, num_classes));
    return Network({channels, height, width}, std::move(layers), embedding);
  }

  void init(Rng& rng) {
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i]->init(layer_params(i), rng);
  }

  void set_embedding(EmbeddingSource source) {
    // Activation index: 0 is the input, i + 1 is the output of layer i.
    embedding_index_ = source == EmbeddingSource::logits || layers_.size() < 2 ? layers_.size() : layers_.size() - 1;
  }

  const Shape& input_shape() const { return input_shape_; }
  std::size_t num_classes() const { return shape_volume(layers_.back()->output_shape()); }
  std::size_t embedding_dim() const {
    return embedding_index_ == 0 ? shape_volume(input_shape_)
                                 : shape_volume(layers_[embedding_index_ - 1]->output_shape());
  }
  std::size_t parameter_count() const { return params_.size(); }
  const std::vector<std::shared_ptr<const Layer>>& layers() const { return layers_; }

  std::span<double> parameters() { return params_; }
  std::span<const double> parameters() const { return params_; }

  // Forward pass retaining intermediates for a subsequent backward().
  Output forward(const Tensor& x) {
    cache_ = run(x);
    return {cache_->back(), (*cache_)[embedding_index_]};
  }

  // Forward pass without retention; does not disturb a pending backward.
  Output infer(const Tensor& x) const {
    auto acts = run(x);
    return {acts.back(), acts[embedding_index_]};
  }

  // Gradient of a loss over theta given dL/dlogits and optionally dL/dembedding
  // (when the embedding is the logits, both contributions add). Consumes the
  // retained forward state.
  std::vector<double> backward(const Tensor& grad_logits, const Tensor* grad_embedding = nullptr) {
    if (!cache_) throw UsageError("Network::backward called without a retained forward pass");
    const auto& acts = *cache_;
    const std::size_t batch = acts.front().rows();
    if (grad_logits.rows() != batch || grad_logits.row_size() != num_classes())
      throw ConfigError("backward: logits gradient has shape " + shape_string(grad_logits.shape()));
    if (grad_embedding && (grad_embedding->rows() != batch || grad_embedding->row_size() != embedding_dim()))
      throw ConfigError("backward: embedding gradient has shape " + shape_string(grad_embedding->shape()));

    std::vector<double> grad(params_.size(), 0.0);
    Tensor g = grad_logits;
    g.reshape(acts.back().shape());
    for (std::size_t i = layers_.size(); i-- > 0;) {
      if (grad_embedding && embedding_index_ == i + 1) {
        auto gv = g.values();
        auto ev = grad_embedding->values();
        for (std::size_t j = 0; j < gv.size(); ++j) gv[j] += ev[j];
      }
      std::span<double> gp(grad.data() + offsets_[i], layers_[i]->param_count());
      g = layers_[i]->backward(acts[i], acts[i + 1], g, layer_params(i), gp);
    }
    cache_.reset();
    return grad;
  }

  bool has_retained_forward() const { return cache_.has_value(); }

 private:
  std::span<double> layer_params(std::size_t i) { return {params_.data() + offsets_[i], layers_[i]->param_count()}; }
  std::span<const double> layer_params(std::size_t i) const {
    return {params_.data() + offsets_[i], layers_[i]->param_count()};
  }

  std::vector<Tensor> run(const Tensor& x) const {
    if (x.rows() == 0) throw ConfigError("forward: empty batch");
    if (x.row_size() != shape_volume(input_shape_))
      throw ConfigError("forward: input rows have " + std::to_string(x.row_size()) + " values, network expects " +
                        shape_string(input_shape_));
    std::vector<Tensor> acts;
    acts.reserve(layers_.size() + 1);
    Tensor in = x;
    Shape s{x.rows()};
    s.insert(s.end(), input_shape_.begin(), input_shape_.end());
    in.reshape(s);
    acts.push_back(std::move(in));
    // Layers address rows through raw offsets, so adjacent layers only need
    // matching row volumes (checked at construction).
    for (std::size_t i = 0; i < layers_.size(); ++i) acts.push_back(layers_[i]->forward(acts.back(), layer_params(i)));
    return acts;
  }

  Shape input_shape_;
  std::vector<std::shared_ptr<const Layer>> layers_;
  std::vector<std::size_t> offsets_;
  std::vector<double> params_;
  std::size_t embedding_index_ = 0;
  std::optional<std::vector<Tensor>> cache_;
};

}  // namespace wscl
