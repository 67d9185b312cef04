#include "xrt/network.hpp"

namespace xrt {

namespace {

Vectorf to_vector(const WeightArray& w) {
  return Eigen::Map<const Vectorf>(w.values.data(), static_cast<Index>(w.values.size()));
}

}  // namespace

HeadWeights head_from_bundle(const ModelBundle& bundle) {
  const WeightArray& w = bundle.tensor("head_dense.weight");
  HeadWeights head;
  head.weights = Eigen::Map<const RowMatrixf>(w.values.data(), w.dims[0], w.dims[1]);
  head.bias = to_vector(bundle.tensor("head_dense.bias"));
  return head;
}

void store_head(ModelBundle& bundle, const HeadWeights& head) {
  WeightArray& w = bundle.tensor("head_dense.weight");
  require(static_cast<Index>(w.dims[0]) == head.weights.rows() && static_cast<Index>(w.dims[1]) == head.weights.cols(),
          Errc::shape_mismatch, "store_head: head shape does not match the bundle");
  std::copy(head.weights.data(), head.weights.data() + head.weights.size(), w.values.begin());
  WeightArray& b = bundle.tensor("head_dense.bias");
  std::copy(head.bias.data(), head.bias.data() + head.bias.size(), b.values.begin());
}

Network::Network(const ModelBundle& bundle) : graph_(build(bundle.architecture)) {
  check_bundle(bundle);
  const std::size_t n = graph_.layers.size();
  params_.resize(n);
  inputs_.resize(n);
  last_use_.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const LayerSpec& l = graph_.layers[i];
    for (const std::string& src : l.inputs) {
      const std::size_t j = *graph_.find(src);
      inputs_[i].push_back(j);
      last_use_[j] = i;
    }
    if (i >= graph_.head_begin) continue;
    if (l.kind == LayerKind::conv) {
      const WeightArray& w = bundle.tensor(l.id + ".weight");
      ConvParams<float> p;
      p.weights = Tensor({w.dims[0], w.dims[1], w.dims[2], w.dims[3]}, w.values);
      p.bias = to_vector(bundle.tensor(l.id + ".bias"));
      p.stride = l.stride;
      p.padding = l.padding;
      params_[i] = std::move(p);
    } else if (l.kind == LayerKind::batchnorm) {
      params_[i] = BatchNorm{to_vector(bundle.tensor(l.id + ".mean")), to_vector(bundle.tensor(l.id + ".var")),
                             to_vector(bundle.tensor(l.id + ".gamma")), to_vector(bundle.tensor(l.id + ".beta"))};
    }
  }
  head_ = head_from_bundle(bundle);
}

Tensor Network::base_forward(const Tensor& input) const {
  const Shape3& expected = graph_.shapes.front();
  require(input.c() == expected.c && input.h() == expected.h && input.w() == expected.w, Errc::shape_mismatch,
          "network input " + to_string(input.shape()) + " does not match expected (n, " + to_string(expected) + ")");

  const std::size_t end = graph_.head_begin;
  const std::size_t result = inputs_[end].front();
  std::vector<Tensor> out(end);
  for (std::size_t i = 0; i < end; ++i) {
    const LayerSpec& l = graph_.layers[i];
    const auto& in = inputs_[i];
    switch (l.kind) {
      case LayerKind::input:
        out[i] = input;
        break;
      case LayerKind::conv:
        out[i] = conv2d_forward(out[in[0]], std::get<ConvParams<float>>(params_[i]));
        break;
      case LayerKind::maxpool:
        out[i] = pool2d_forward(out[in[0]], PoolKind::max, l.kernel, l.stride, l.padding);
        break;
      case LayerKind::avgpool:
        out[i] = pool2d_forward(out[in[0]], PoolKind::avg, l.kernel, l.stride, l.padding);
        break;
      case LayerKind::batchnorm: {
        const auto& bn = std::get<BatchNorm>(params_[i]);
        out[i] = batchnorm_inference(out[in[0]], bn.mean, bn.var, bn.gamma, bn.beta, l.eps);
        break;
      }
      case LayerKind::relu:
        out[i] = last_use_[in[0]] == i ? relu(std::move(out[in[0]])) : relu(out[in[0]]);
        break;
      case LayerKind::add:
      case LayerKind::concat: {
        std::vector<const Tensor*> parts;
        for (std::size_t j : in) parts.push_back(&out[j]);
        out[i] = merge<float>(parts, l.kind == LayerKind::add ? MergeKind::add : MergeKind::concat_channels);
        break;
      }
      case LayerKind::gap:
        out[i] = global_avg_pool(out[in[0]]);
        break;
      case LayerKind::dense:
      case LayerKind::softmax:
        throw Error(Errc::invalid_argument, "layer '" + l.id + "': dense/softmax are only supported in the head");
    }
    for (std::size_t j : in) {
      if (last_use_[j] == i && j != result) out[j] = Tensor();
    }
  }
  return std::move(out[result]);
}

RowMatrixf Network::features(const Tensor& input) const {
  Tensor pooled = global_avg_pool(base_forward(input));
  return pooled.flat();
}

RowMatrixf head_probabilities(const RowMatrixf& features, const HeadWeights& head) {
  return softmax(dense_forward(features, head.weights, head.bias));
}

RowMatrixf Network::probabilities(const Tensor& input) const { return head_probabilities(features(input), head_); }

}  // namespace xrt
