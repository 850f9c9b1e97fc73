#pragma once

#include "bq2/matrix.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace bq2 {

inline constexpr int kVocabSize = 256;

struct ModelConfig {
  int vocab = kVocabSize;
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int n_kv_heads = 2;
  int d_ff = 128;
  int max_seq = 256;
  std::uint64_t seed = 1234;
  double rope_theta = 10000.0;
  double norm_eps = 1e-5;

  int head_dim() const { return d_model / n_heads; }
  int kv_dim() const { return n_kv_heads * head_dim(); }
  // Throws ConfigError when an invariant is violated.
  void validate() const;
};

// The seven linear modules of a block, in manifest order.
enum class LinearKind : int { q = 0, k, v, o, gate, up, down };
inline constexpr std::array<LinearKind, 7> kLinearKinds = {LinearKind::q,    LinearKind::k,  LinearKind::v,   LinearKind::o,
                                                           LinearKind::gate, LinearKind::up, LinearKind::down};

// Input sites whose second moments are collected during calibration.
enum class SublayerKind : int { qkv_in = 0, attn_out_in, ffn_up_in, ffn_down_in };
inline constexpr std::array<SublayerKind, 4> kSublayerKinds = {SublayerKind::qkv_in, SublayerKind::attn_out_in,
                                                               SublayerKind::ffn_up_in, SublayerKind::ffn_down_in};

std::string_view linear_name(LinearKind kind);
LinearKind parse_linear_kind(std::string_view name);
std::string_view sublayer_name(SublayerKind kind);
SublayerKind parse_sublayer_kind(std::string_view name);
SublayerKind input_site(LinearKind kind);

// Online Hadamard transforms applied during inference (R3 on per-head
// queries/keys, R4 on the down-projection input).
struct RuntimeTransforms {
  bool apply_r3 = false;
  bool apply_r4 = false;
  std::uint64_t r3_seed = 0;
  std::uint64_t r4_seed = 0;
};

struct LayerWeights {
  Matrix wq;      // d_model x d_model
  Matrix wk;      // kv_dim x d_model
  Matrix wv;      // kv_dim x d_model
  Matrix wo;      // d_model x d_model
  Matrix w_gate;  // d_ff x d_model
  Matrix w_up;    // d_ff x d_model
  Matrix w_down;  // d_model x d_ff
  Vector attn_norm;
  Vector ffn_norm;

  Matrix& weight(LinearKind kind);
  const Matrix& weight(LinearKind kind) const;
};

struct Model {
  ModelConfig config;
  Matrix embedding;  // vocab x d_model
  std::vector<LayerWeights> layers;
  Vector final_norm;
  Matrix lm_head;  // vocab x d_model
  RuntimeTransforms runtime;

  // Random initialization, deterministic in config.seed.
  static Model init(const ModelConfig& config);
  std::uint64_t weight_hash() const;
};

// Linear layers of the inference path. Inputs and outputs are row-per-token.
class LinearBackend {
 public:
  virtual ~LinearBackend() = default;
  virtual MatrixD apply(int layer, LinearKind kind, const MatrixD& x) const = 0;
};

// Everything needed to run the 64-bit inference path. The linear layers are
// pluggable so that quantized code streams can be evaluated directly.
struct InferenceModel {
  ModelConfig config;
  RuntimeTransforms runtime;
  MatrixD embedding;
  MatrixD lm_head;
  std::vector<VectorD> attn_norm;
  std::vector<VectorD> ffn_norm;
  VectorD final_norm;
  std::shared_ptr<const LinearBackend> linears;
};

std::shared_ptr<const InferenceModel> make_inference(const Model& model);
// Same FP components as `model`, linears served by `backend`.
std::shared_ptr<const InferenceModel> make_inference(const Model& model, std::shared_ptr<const LinearBackend> backend);
std::shared_ptr<const InferenceModel> with_runtime(const std::shared_ptr<const InferenceModel>& base, const RuntimeTransforms& runtime);

// Incremental causal decoding with a key/value cache.
class Session {
 public:
  explicit Session(std::shared_ptr<const InferenceModel> model);

  // Called with the input rows of every linear site during extend().
  using Observer = std::function<void(int layer, SublayerKind site, const MatrixD& x)>;

  // Feeds tokens and returns one logit row per fed token.
  MatrixD extend(std::span<const int> tokens);
  void set_observer(Observer observer) { observer_ = std::move(observer); }
  int length() const { return length_; }
  const InferenceModel& model() const { return *model_; }

 private:
  std::shared_ptr<const InferenceModel> model_;
  std::vector<MatrixD> keys_;
  std::vector<MatrixD> values_;
  Observer observer_;
  int length_ = 0;
};

std::vector<int> encode_text(std::string_view text);
std::string decode_tokens(std::span<const int> tokens);

MatrixD forward_logits(const InferenceModel& model, std::span<const int> tokens);
MatrixD forward_logits(const Model& model, std::span<const int> tokens);

// log softmax of one logit row
VectorD log_softmax(const Eigen::Ref<const VectorD>& row);
// Index of the largest entry; ties go to the smaller index.
int argmax(const Eigen::Ref<const VectorD>& row);

// Sum of log p(continuation | context). Empty continuation gives 0; an empty
// context with non-empty continuation is an InputError.
double sequence_loglik(const InferenceModel& model, std::span<const int> context, std::span<const int> continuation);
double sequence_loglik(Session prefix, std::span<const int> continuation, const VectorD& last_logits);

// Greedy argmax decoding. `stop`, when set, is consulted after every emitted
// token with the output so far and ends generation when it returns true.
std::vector<int> greedy_generate(const InferenceModel& model, std::span<const int> prompt, int n_tokens,
                                 const std::function<bool(std::span<const int>)>& stop = {});

// Fold the RMS-norm scales into the adjacent linear layers (exact); all norm
// vectors become ones.
Model fold_norm_scales(const Model& model);

}  // namespace bq2
