#ifndef TWINS_FINITE_DIFF_HPP
#define TWINS_FINITE_DIFF_HPP

#include <functional>

#include "twins/tensor.hpp"

namespace twins {

/// Central differences (f(p+h) - f(p-h)) / 2h for every coordinate of every tensor.
/// Verification oracle only: costs two evaluations of f per coordinate.
template <typename Scalar>
GradientSet<Scalar> finite_diff_grad(const std::function<Scalar(const ParamStore<Scalar>&)>& f,
                                     const ParamStore<Scalar>& params, Scalar h) {
  if (!(h > Scalar(0))) throw InvalidArgument("finite_diff_grad: step must be positive");
  ParamStore<Scalar> probe = params;
  GradientSet<Scalar> grads;
  for (auto& [name, tensor] : probe) {
    Tensor<Scalar> g(tensor.shape());
    for (Index i = 0; i < tensor.size(); ++i) {
      const Scalar saved = tensor[i];
      tensor[i] = saved + h;
      const Scalar up = f(probe);
      tensor[i] = saved - h;
      const Scalar down = f(probe);
      tensor[i] = saved;
      g[i] = (up - down) / (Scalar(2) * h);
    }
    grads.emplace(name, std::move(g));
  }
  return grads;
}

}  // namespace twins

#endif  // TWINS_FINITE_DIFF_HPP
