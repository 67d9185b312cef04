#pragma once

#include <memory>
#include <variant>
#include <vector>

#include "xrt/architectures.hpp"
#include "xrt/bundle.hpp"
#include "xrt/kernels.hpp"

namespace xrt {

/// The trainable classifier: logits = features * weights + bias.
struct HeadWeights {
  RowMatrixf weights;  // (f, k)
  Vectorf bias;        // k

  friend bool operator==(const HeadWeights&, const HeadWeights&) = default;
};

/// Executes a bundle's layer graph. Weights are copied into kernel-ready form
/// on construction; afterwards the object is immutable and every method is
/// safe to call concurrently.
class Network {
 public:
  explicit Network(const ModelBundle& bundle);

  const LayerGraph& graph() const { return graph_; }
  const HeadWeights& head() const { return head_; }
  Index feature_count() const { return head_.weights.rows(); }

  /// Runs every base layer; returns the map fed to the head's pooling.
  Tensor base_forward(const Tensor& input) const;

  /// Global-average-pooled base output, one row per sample.
  RowMatrixf features(const Tensor& input) const;

  RowMatrixf probabilities(const Tensor& input) const;

 private:
  struct BatchNorm {
    Vectorf mean, var, gamma, beta;
  };
  using Params = std::variant<std::monostate, ConvParams<float>, BatchNorm>;

  LayerGraph graph_;
  std::vector<Params> params_;
  std::vector<std::vector<std::size_t>> inputs_;  // upstream layer indices
  std::vector<std::size_t> last_use_;
  HeadWeights head_;
};

/// Head-only evaluation on precomputed features.
RowMatrixf head_probabilities(const RowMatrixf& features, const HeadWeights& head);

HeadWeights head_from_bundle(const ModelBundle& bundle);
void store_head(ModelBundle& bundle, const HeadWeights& head);

}  // namespace xrt
