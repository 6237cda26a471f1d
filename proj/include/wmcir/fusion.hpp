// Copyright 2026 The wmcir Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "wmcir/error.hpp"

namespace wmcir {

/// Dot product accumulated in double, strictly in ascending index order.
template <class A, class B>
double dot(std::span<const A> a, std::span<const B> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  }
  return acc;
}

template <class T>
double l2_norm(std::span<const T> a) {
  return std::sqrt(dot(a, a));
}

/// Cosine similarity, clamped to [-1, 1].
template <class A, class B>
double cosine(std::span<const A> a, std::span<const B> b) {
  if (a.size() != b.size()) {
    throw Error(ErrorCode::kInvalidArgument, "cosine: dimension mismatch (" +
                                                 std::to_string(a.size()) + " vs " +
                                                 std::to_string(b.size()) + ")");
  }
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) throw Error(ErrorCode::kDegenerateQuery, "cosine: zero-norm input");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

template <class A, class B>
double cosine(const std::vector<A>& a, const std::vector<B>& b) {
  return cosine(std::span<const A>(a), std::span<const B>(b));
}

/// A composed query q = (1 - alpha) v + alpha t. Not renormalized: every
/// consumer goes through cosine, which is scale invariant.
struct FusedQuery {
  std::vector<double> vector;
  double alpha = 0.0;
  std::string source_query_id;

  std::size_t dim() const noexcept { return vector.size(); }
  double norm() const { return l2_norm(std::span<const double>(vector)); }
};

inline void check_unit_interval(double x, const char* name) {
  if (!(x >= 0.0 && x <= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument,
                std::string(name) + " must lie in [0, 1], got " + std::to_string(x));
  }
}

/// Weighted fusion of a reference-image embedding v and a modifier-text
/// embedding t. alpha = 0 returns v, alpha = 1 returns t, both exactly.
template <class T>
FusedQuery compose_query(std::span<const T> v, std::span<const T> t, double alpha,
                         std::string source_query_id = {}) {
  if (v.size() != t.size()) {
    throw Error(ErrorCode::kInvalidArgument, "compose_query: dimension mismatch (" +
                                                 std::to_string(v.size()) + " vs " +
                                                 std::to_string(t.size()) + ")");
  }
  check_unit_interval(alpha, "alpha");
  FusedQuery q;
  q.alpha = alpha;
  q.source_query_id = std::move(source_query_id);
  q.vector.resize(v.size());
  const double keep = 1.0 - alpha;
  for (std::size_t i = 0; i < v.size(); ++i) {
    q.vector[i] = keep * static_cast<double>(v[i]) + alpha * static_cast<double>(t[i]);
  }
  return q;
}

template <class T>
FusedQuery compose_query(const std::vector<T>& v, const std::vector<T>& t, double alpha,
                         std::string source_query_id = {}) {
  return compose_query(std::span<const T>(v), std::span<const T>(t), alpha,
                       std::move(source_query_id));
}

}  // namespace wmcir
