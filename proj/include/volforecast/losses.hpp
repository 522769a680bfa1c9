// Training objectives: voxelwise MSE, random-frozen-feature perceptual
// loss, latent-consistency ODE penalty and their weighted combination.
#pragma once

#include "volforecast/models.hpp"
#include "volforecast/tensor.hpp"
#include "volforecast/volume.hpp"

namespace volf {

struct LossWeights {
  double lambda_feat = 0.1;
  double lambda_ode = 0.1;
};

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  detail::check_same_shape(pred, target, "mse_loss");
  Tensor<T> d = sub(pred, target);
  return mean(mul(d, d));
}

// Masked variant for evaluation parity: mean over in-mask voxels only.
// Not differentiable through the mask (the mask is a constant).
template <typename T>
Tensor<T> masked_mse_loss(const Tensor<T>& pred, const Tensor<T>& target,
                          const std::vector<uint8_t>& mask) {
  detail::check_same_shape(pred, target, "mse_loss");
  if (mask.size() != pred.values().size())
    throw std::invalid_argument("masked_mse_loss: mask length mismatch");
  std::vector<T> w(mask.size());
  int64_t count = 0;
  for (size_t i = 0; i < mask.size(); ++i) {
    w[i] = mask[i] ? T(1) : T(0);
    count += mask[i] ? 1 : 0;
  }
  if (count == 0) throw std::invalid_argument("masked_mse_loss: empty mask");
  Tensor<T> wt(pred.shape(), std::move(w));
  Tensor<T> d = sub(pred, target);
  return scale(sum(mul(wt, mul(d, d))), T(1) / static_cast<T>(count));
}

// MSE between frozen-encoder feature maps of pred and target, averaged per
// element and summed over tapped levels. Encoder parameters receive no
// gradients; input gradients flow to pred.
template <typename T>
Tensor<T> feature_loss(const Tensor<T>& pred, const Tensor<T>& target, OdeUNetModel<T>& model) {
  auto fp = model.frozen_features(pred);
  std::vector<Tensor<T>> ft;
  {
    NoGradGuard ng;  // target branch carries no gradient
    ft = model.frozen_features(target);
  }
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (size_t l = 0; l < fp.size(); ++l) total = add(total, mse_loss(fp[l], ft[l]));
  return total;
}

// Mean squared difference between the integrated latent at t1+horizon and
// the encoder latent of the true target.
template <typename T>
Tensor<T> ode_consistency_residual(OdeUNetModel<T>& model, const Tensor<T>& source,
                                   const Tensor<T>& target, double t1, double horizon = 24.0) {
  Tensor<T> z_pred = model.integrate_latent(model.encode_latent(source), t1, horizon);
  Tensor<T> z_true = model.encode_latent(target);
  return mse_loss(z_pred, z_true);
}

template <typename T>
Tensor<T> ode_consistency_residual(OdeUNetModel<T>& model, const LongitudinalPair& pair) {
  return ode_consistency_residual(model, volume_to_tensor<T>(pair.source),
                                  volume_to_tensor<T>(pair.target), pair.t1, 24.0);
}

template <typename T>
struct LossBreakdown {
  Tensor<T> total;
  T mse = T(0), feat = T(0), ode = T(0);
};

// L_total = L_mse + lambda_feat * L_feat + lambda_ode * L_ode.
// The feat/ode terms apply only to the OdeUNet architecture.
template <typename T>
LossBreakdown<T> total_loss(const Tensor<T>& pred, const Tensor<T>& target, Model<T>& model,
                            const Tensor<T>& source, double t1, const LossWeights& weights) {
  LossBreakdown<T> out;
  Tensor<T> l = mse_loss(pred, target);
  out.mse = l.item();
  auto* ode_model = dynamic_cast<OdeUNetModel<T>*>(&model);
  if (ode_model && (weights.lambda_feat > 0 || weights.lambda_ode > 0)) {
    if (weights.lambda_feat > 0) {
      Tensor<T> lf = feature_loss(pred, target, *ode_model);
      out.feat = lf.item();
      l = add(l, scale(lf, static_cast<T>(weights.lambda_feat)));
    }
    if (weights.lambda_ode > 0) {
      Tensor<T> lo = ode_consistency_residual(*ode_model, source, target, t1, 24.0);
      out.ode = lo.item();
      l = add(l, scale(lo, static_cast<T>(weights.lambda_ode)));
    }
  } else if (!ode_model && (weights.lambda_feat > 0 || weights.lambda_ode > 0)) {
    throw std::invalid_argument("total_loss: feat/ode weights require the OdeUNet architecture");
  }
  out.total = l;
  return out;
}

}  // namespace volf
