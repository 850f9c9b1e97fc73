#pragma once

#include "bq2/calibration.hpp"
#include "bq2/matrix.hpp"
#include "bq2/model.hpp"
#include "bq2/numeric.hpp"

#include <json.hpp>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace bq2 {

enum class RotationKind { identity, random_hadamard, learned_orthogonal, butterfly };

std::string_view rotation_kind_name(RotationKind kind);
RotationKind parse_rotation_kind(std::string_view name);

struct RotationSpec {
  RotationKind kind = RotationKind::identity;
  std::uint64_t seed = 0;
  // learned_orthogonal: R1 is d_model x d_model; r2[layer][kv_head] is
  // head_dim x head_dim.
  MatrixD r1;
  std::vector<std::vector<MatrixD>> r2;
  // butterfly: input-side transforms per (layer, linear), applied at
  // quantization time rather than fused.
  std::map<std::pair<int, LinearKind>, ButterflyAngles> butterfly;
  // R3 is computationally invariant; R4 is folded into w_down iff apply_r4.
  RuntimeTransforms runtime;

  static RotationSpec identity();
  static RotationSpec random_hadamard(std::uint64_t seed, bool r3 = true, bool r4 = true);
  static RotationSpec learned(MatrixD r1, std::vector<std::vector<MatrixD>> r2, std::uint64_t runtime_seed, bool r3 = true,
                              bool r4 = true);
};

// Seeds, flags and kind (matrices are stored separately).
nlohmann::json rotation_to_json(const RotationSpec& spec);
RotationSpec rotation_from_json(const nlohmann::json& j);

// Global residual rotation and per-layer, per-KV-head value rotations that
// a spec implies for `config` (identity matrices when the spec has none).
MatrixD residual_rotation(const RotationSpec& spec, const ModelConfig& config);
std::vector<MatrixD> value_rotations(const RotationSpec& spec, const ModelConfig& config, int layer);
MatrixD down_rotation(const RotationSpec& spec, const ModelConfig& config);

// Folds norm scales, then the spec's orthogonal transforms, into a copy of
// `model`. The result carries spec.runtime as its runtime transforms.
Model fuse_rotations(const Model& model, const RotationSpec& spec);

// Hessians of the fused model's linear inputs, derived exactly from the
// Hessians of the unrotated model.
HessianSet rotate_hessians(const HessianSet& hessians, const RotationSpec& spec, const ModelConfig& config);

// Applies the runtime Hadamard for `site` to every row of `x` iff the
// corresponding flag is set. Sites: qkv_in is used for the per-head R3
// (queries/keys), ffn_down_in for R4.
MatrixD apply_runtime_transforms(const MatrixD& x, const RuntimeTransforms& rt, SublayerKind site, int block);

struct CayleyConfig {
  int iters = 50;
  double lr = 0.05;
  bool hadamard_init = true;
  std::uint64_t seed = 7;
};

struct CayleyResult {
  MatrixD r1;
  std::vector<std::vector<MatrixD>> r2;
  std::vector<double> trace;  // objective per iteration, trace[0] at init
  double best_objective = 0.0;
  int best_iter = 0;
};

// Learns R1/R2 by Cayley steps on the summed relative proxy loss of 2-bit
// round-to-nearest quantization (straight-through gradient). Returns the best
// iterate; its objective never exceeds the initial one.
CayleyResult learn_cayley_rotations(const Model& model, const HessianSet& hessians, const CayleyConfig& cfg);

struct ButterflyConfig {
  int iters = 40;
  double lr = 0.02;
};

struct ButterflyResult {
  ButterflyAngles angles;
  double initial_objective = 0.0;
  double best_objective = 0.0;
};

// Input-side butterfly B for W (out x n): the layer is represented as Q B
// with Q = quantize(W B^T). Objective tr((QB - W) H (QB - W)^T) with a 2-bit
// round-to-nearest Q; best iterate is returned (never worse than zero angles).
ButterflyResult learn_butterfly_angles(const MatrixD& w, const MatrixD& h, const ButterflyConfig& cfg);

// Straight-through objectives, exposed for tests.
double cayley_objective(const Model& model, const HessianSet& hessians, const MatrixD& r1,
                        const std::vector<std::vector<MatrixD>>& r2);
double butterfly_objective(const MatrixD& w, const MatrixD& h, const ButterflyAngles& angles);

}  // namespace bq2
