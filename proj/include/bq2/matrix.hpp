#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace bq2 {

// Dense storage is 32-bit row-major; factorizations and reductions run on
// the 64-bit variants.
using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXf;
using MatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VectorD = Eigen::VectorXd;

bool all_finite(const Matrix& m);
bool all_finite(const MatrixD& m);

// max |a_ij - a_ji|
double symmetry_error(const MatrixD& m);

// ||R^T R - I||_F
double orthogonality_error(const MatrixD& r);

bool is_power_of_two(std::size_t n);
int log2_exact(std::size_t n);

// FNV-1a over raw bytes; used for weight/code hashes and manifest hashing.
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(std::string_view text, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t hash_matrix(const Matrix& m, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t hash_vector(const Vector& v, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace bq2
