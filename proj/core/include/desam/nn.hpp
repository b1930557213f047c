// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Parameter containers shared by the decoder modules.

#pragma once

#include <cstddef>
#include <string>

#include "desam/autograd.hpp"
#include "desam/random.hpp"
#include "desam/tensor.hpp"

namespace desam::nn {

/// weight [out, in], bias [out].
struct Linear {
  Tensor weight;
  Tensor bias;

  static Linear create(std::size_t in, std::size_t out, Rng& rng);
  ag::Var operator()(const ag::Binder& bind, const ag::Var& x) const {
    return ag::linear(x, bind(weight), bind(bias));
  }

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + ".weight", self.weight);
    f(prefix + ".bias", self.bias);
  }
};

/// weight [out, in, k, k], bias [out]; stride 1, "same" padding.
struct Conv {
  Tensor weight;
  Tensor bias;

  static Conv create(std::size_t in, std::size_t out, std::size_t kernel, Rng& rng);
  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t out_channels() const { return weight.dim(0); }
  ag::Var operator()(const ag::Binder& bind, const ag::Var& x) const {
    return ag::conv2d(x, bind(weight), bind(bias), weight.dim(2) / 2);
  }

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + ".weight", self.weight);
    f(prefix + ".bias", self.bias);
  }
};

/// Per-feature affine of a normalization layer.
struct Norm {
  Tensor gamma;
  Tensor beta;

  static Norm create(std::size_t features);

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + ".gamma", self.gamma);
    f(prefix + ".beta", self.beta);
  }
};

/// Group count for channel-group normalization: groups of at most 4 channels.
std::size_t norm_groups(std::size_t channels);

}  // namespace desam::nn
