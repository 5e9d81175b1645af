#pragma once

// Small fixed-direction models whose only random quantities are the scales g.

#include <cmath>
#include <string>
#include <vector>

#include "bhn/bhn.hpp"

namespace bhn {

struct FixedTask {
  Model model;
  std::vector<std::string> frozen;
};

namespace detail {
inline FixedTask fixed_chain(std::size_t links, double noise_sd, const flows::FlowStack& flow, Rng& rng,
                             const flows::FlowInit& init, PriorConfig prior) {
  net::PrimaryNetSpec spec;
  spec.inputs = 1;
  spec.head = net::Head::Regression;
  for (std::size_t i = 0; i < links; ++i) spec.layers.push_back({1, net::Activation::Linear});
  FixedTask t;
  t.model.kind = ModelKind::Bhn;
  t.model.net = spec;
  t.model.prior = prior;
  t.model.flow = flow;
  flows::init_small(t.model.flow, t.model.params, rng, init.scale, init.mean, init.log_sigma);
  for (std::size_t l = 0; l < links; ++l) {
    t.model.params.set(net::PrimaryNetSpec::prefix(l) + "v", Tensor(Shape{1, 1}, 1.0));
    t.model.params.set(net::PrimaryNetSpec::prefix(l) + "b", Tensor(Shape{1}, 0.0));
  }
  t.model.params.set(kLogVar, Tensor::vector({2 * std::log(noise_sd)}));
  t.frozen = {"net.*", kLogVar};
  t.model.validate();
  return t;
}
}  // namespace detail

/// y = g + noise with known noise level: the primary net is one linear unit
/// with unit direction and zero bias fed a constant input of 1.
inline FixedTask gaussian_mean_task(double noise_sd, Rng& rng, PriorConfig prior = {},
                                    flows::FlowInit init = {0.0, 0.0, 0.0}) {
  return detail::fixed_chain(1, noise_sd, flows::FlowStack::make(flows::FlowKind::None, 1, 0, 1, 0), rng, init,
                             prior);
}

/// y_hat = a * b * x: two chained linear units with fixed unit directions,
/// so g = (a, b) and the posterior is symmetric under (a, b) -> (-a, -b).
inline FixedTask product_task(double noise_sd, flows::FlowKind kind, std::size_t depth, std::size_t hidden, Rng& rng,
                              PriorConfig prior = {}, flows::FlowInit init = {1e-2, 0.0, 0.0}) {
  auto flow = flows::FlowStack::make(depth == 0 ? flows::FlowKind::None : kind, 2, depth, hidden, rng.next_seed());
  return detail::fixed_chain(2, noise_sd, flow, rng, init, prior);
}

/// Constant-input dataset for gaussian_mean_task.
inline Dataset constant_input_dataset(const std::vector<double>& y) {
  Dataset d(1, 0);
  for (double v : y) d.add(std::vector<double>{1.0}, v);
  return d;
}

}  // namespace bhn
