#pragma once

#include "bq2/calibration.hpp"
#include "bq2/codebooks.hpp"
#include "bq2/model.hpp"
#include "bq2/numeric.hpp"
#include "bq2/rotations.hpp"

#include <Eigen/Core>
#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace bq2 {

enum class Variant { identity, rtn, a_quip, b_spin, c_butterfly, d_tcq, e_rvq, f_aq };

std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view name);
// Variants whose inference path carries runtime Hadamards (R3/R4).
bool has_runtime_transforms(Variant v);

struct QuantMethodConfig {
  std::string id;  // report label; defaults to the variant name
  Variant variant = Variant::rtn;
  double bits = 0.0;  // nominal bits per weight; 0 = implied by the knobs
  std::uint64_t seed = 11;
  double damping = 0.01;
  // A / B runtime transforms
  bool r3 = true;
  bool r4 = true;
  // A / C
  std::size_t e8p_size = 65536;
  std::vector<double> scale_search = {0.7, 0.8, 0.9, 1.0, 1.1, 1.2};
  // B
  int cayley_iters = 50;
  double cayley_lr = 0.05;
  // C
  int butterfly_iters = 40;
  double butterfly_lr = 0.02;
  // D
  int trellis_states = 16;
  int trellis_bits = 2;
  // E
  int vq_group = 4;
  int vq_k = 256;
  int vq_residual_k = 16;
  int kmeans_iters = 20;
  // F
  int aq_group = 4;
  int aq_k = 16;
  int aq_m_min = 2;
  int aq_m_max = 3;
  int aq_beam = 8;
  int aq_iters = 3;
  double relative_mse_tolerance = 0.1;

  std::string label() const { return id.empty() ? std::string(variant_name(variant)) : id; }
  void validate() const;
};

// Bits per weight of the code streams alone, as implied by the knobs.
double nominal_bits(const QuantMethodConfig& cfg);

// Only the knobs that apply to the variant are emitted; method_from_json
// rejects knobs that do not apply (ConfigError).
nlohmann::json method_to_json(const QuantMethodConfig& cfg);
QuantMethodConfig method_from_json(const nlohmann::json& j);

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Process-wide cache; building the 2^16-entry table takes a moment.
std::shared_ptr<const E8PCodebook> shared_e8p(std::size_t size);

struct CodeStream {
  int bits = 0;
  std::vector<std::uint32_t> values;
};

std::vector<std::uint8_t> pack_codes(const CodeStream& stream);
CodeStream unpack_codes(std::span<const std::uint8_t> bytes, int bits, std::size_t count);

struct QuantizedLayer {
  int layer = 0;
  LinearKind kind = LinearKind::q;
  int rows = 0;
  int cols = 0;
  // dense | scalar | e8p | tcq | rvq | aq
  std::string encoding = "dense";
  std::string codebook;
  std::vector<CodeStream> streams;
  Vector scales;
  std::vector<Eigen::half> su;  // per row
  std::vector<Eigen::half> sv;  // per column
  std::uint64_t in_seed = 0;
  std::uint64_t out_seed = 0;
  ButterflyAngles butterfly;  // input-side transform, n = 0 when absent
  Matrix dense;
  double proxy_error = 0.0;
  double primary_proxy_error = -1.0;  // residual VQ only: first stage alone

  std::size_t weight_count() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

struct CodebookRecord {
  std::string id;
  std::string kind;  // e8p | trellis | vq | aq
  nlohmann::json params;
  std::vector<Matrix> tables;  // stored entries (empty for computational codebooks)
};

struct QuantizedModel {
  ModelConfig config;
  QuantMethodConfig method;
  RotationSpec rotation;
  RuntimeTransforms runtime;
  std::string config_hash;
  // full-precision components
  Matrix embedding;
  Matrix lm_head;
  std::vector<Vector> attn_norm;
  std::vector<Vector> ffn_norm;
  Vector final_norm;
  std::vector<QuantizedLayer> layers;  // ascending (layer, kind)
  std::map<std::string, CodebookRecord> codebooks;

  const QuantizedLayer& layer(int l, LinearKind kind) const;
  QuantizedLayer& layer(int l, LinearKind kind);
  double mean_proxy_error() const;
};

// Stateless view of the codebooks a model references.
class CodebookCache {
 public:
  explicit CodebookCache(const QuantizedModel& qm);
  const E8PCodebook& e8p(const std::string& id) const;
  const Trellis& trellis(const std::string& id) const;
  const VQCodebook& vq(const std::string& id) const;
  const AdditiveCodebooks& aq(const std::string& id) const;

 private:
  std::map<std::string, std::shared_ptr<const E8PCodebook>> e8p_;
  std::map<std::string, Trellis> trellis_;
  std::map<std::string, VQCodebook> vq_;
  std::map<std::string, AdditiveCodebooks> aq_;
};

using ProgressFn = std::function<void(const std::string& line)>;

// Runs the variant's pipeline: rotation fusion, then the encoder per linear.
// Hessians are those of the unrotated model (collected on `model`).
QuantizedModel quantize_model(const Model& model, const QuantMethodConfig& cfg, const HessianSet& hessians, int workers = 1,
                              const ProgressFn& progress = {});

// Full-precision container (variant identity); also the checkpoint format.
QuantizedModel make_checkpoint(const Model& model);

// Effective weight of one layer reconstructed from its codes (64-bit).
MatrixD decode_layer(const QuantizedLayer& layer, const CodebookCache& cache);

Model decompress_model(const QuantizedModel& qm);

// Inference model whose linear layers run directly on the code streams
// (transforms applied to activations, not to weights).
std::shared_ptr<const InferenceModel> code_level_model(const QuantizedModel& qm);

// The full rotation spec, including learned matrices stored in the payload.
RotationSpec rotation_spec(const QuantizedModel& qm);

void save_quantized(const QuantizedModel& qm, const std::filesystem::path& dir);
QuantizedModel load_quantized(const std::filesystem::path& dir);
void save_checkpoint(const Model& model, const std::filesystem::path& dir, const std::string& config_hash = {});
Model load_checkpoint(const std::filesystem::path& dir);

// FNV-1a over all code streams, in layer order.
std::uint64_t code_hash(const QuantizedModel& qm);

struct SizeInputs {
  double code_bytes = 0.0;
  double codebook_bytes = 0.0;
  double scale_bytes = 0.0;
  double fp_bytes = 0.0;
  double weight_count = 0.0;
  double reference_bytes = 0.0;  // 16-bit size of the whole model
};

struct SizeReport {
  double payload_bytes = 0.0;  // code + codebook + scale
  double total_bytes = 0.0;    // payload + full-precision components
  double bpw = 0.0;
  double compression_ratio = 0.0;
  std::map<std::string, double> bpw_by_kind;
};

SizeReport account_size(const SizeInputs& in);
SizeReport account_size(const QuantizedModel& qm);

struct DistillConfig {
  int epochs = 3;
  double lr = 2e-3;
  int batch = 4;
};

struct DistillResult {
  QuantizedModel student;
  std::vector<double> ce_trace;  // epoch 0 = before training
  int best_epoch = 0;
};

// Trains the SU/SV vectors of a trellis-coded student against the teacher's
// distribution; code streams are never touched. Returns the best epoch.
DistillResult distill_scales(const Model& teacher, const QuantizedModel& student, const Corpus& corpus,
                             const DistillConfig& cfg, const ProgressFn& progress = {});

// Mean soft cross-entropy of the student against the teacher over `corpus`.
double distill_ce(const InferenceModel& teacher, const InferenceModel& student, const Corpus& corpus);

}  // namespace bq2
