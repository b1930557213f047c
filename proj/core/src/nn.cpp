// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include "desam/nn.hpp"

#include <cmath>

namespace desam::nn {

namespace {

// PyTorch-style default: U(-1/sqrt(fan_in), 1/sqrt(fan_in)), rounded to float
// so checkpoints round-trip exactly.
void init_uniform(Tensor& t, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  t.round_to_float();
}

}  // namespace

Linear Linear::create(std::size_t in, std::size_t out, Rng& rng) {
  Linear l{Tensor({out, in}), Tensor({out})};
  init_uniform(l.weight, in, rng);
  init_uniform(l.bias, in, rng);
  return l;
}

Conv Conv::create(std::size_t in, std::size_t out, std::size_t kernel, Rng& rng) {
  Conv c{Tensor({out, in, kernel, kernel}), Tensor({out})};
  init_uniform(c.weight, in * kernel * kernel, rng);
  init_uniform(c.bias, in * kernel * kernel, rng);
  return c;
}

Norm Norm::create(std::size_t features) {
  return Norm{Tensor({features}, 1.0), Tensor({features}, 0.0)};
}

std::size_t norm_groups(std::size_t channels) {
  std::size_t size = 1;
  for (std::size_t d = 1; d <= 4; ++d) {
    if (channels % d == 0) size = d;
  }
  return channels / size;
}

}  // namespace desam::nn
