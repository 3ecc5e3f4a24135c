#pragma once

// Helpers shared by the op translation units.

#include <initializer_list>

#include "dysp/error.hpp"
#include "dysp/tensor.hpp"

namespace dysp::detail {

// Builds an op result. The backward closure is attached only when recording
// is enabled and at least one parent requires a gradient.
Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                   std::function<void(Node&)> backward, const char* op);

inline bool wants_grad(const Node& node, std::size_t parent) {
  return node.parents[parent]->requires_grad;
}

inline std::vector<double>& parent_grad(Node& node, std::size_t parent) {
  return node.parents[parent]->ensure_grad();
}

inline const std::vector<double>& parent_data(const Node& node, std::size_t parent) {
  return node.parents[parent]->data;
}

// C[M,N] += A[M,K] * B[K,N]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n);
// C[M,N] += A[M,K] * B[N,K]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n);
// C[M,N] += A[K,M]^T * B[K,N]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n);

}  // namespace dysp::detail
