#include "bq2/errors.hpp"
#include "bq2/quantizers.hpp"
#include "bq2/train.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

namespace bq2 {

namespace {

MatrixD softmax_rows(const MatrixD& logits) {
  MatrixD p(logits.rows(), logits.cols());
  for (Eigen::Index t = 0; t < logits.rows(); ++t) p.row(t) = log_softmax(logits.row(t).transpose()).array().exp().transpose();
  return p;
}

double soft_ce(const MatrixD& teacher_probs, const MatrixD& student_logits) {
  double total = 0.0;
  for (Eigen::Index t = 0; t < student_logits.rows(); ++t) {
    const VectorD lq = log_softmax(student_logits.row(t).transpose());
    total -= teacher_probs.row(t).dot(lq);
  }
  return total;
}

struct TcqLayer {
  std::size_t index = 0;  // into QuantizedModel::layers
  MatrixD t_in;
  MatrixD t_out;
  MatrixD values;  // trellis reproduction values, no SU/SV
};

Matrix effective_weight(const TcqLayer& l, const VectorD& su, const VectorD& sv) {
  const MatrixD core = su.asDiagonal() * l.values * sv.asDiagonal();
  return (l.t_out.transpose() * core * l.t_in).cast<float>();
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

Eigen::half to_half_positive(double v) {
  Eigen::half h(static_cast<float>(v));
  const float smallest = 6.103515625e-05f;  // smallest normal half
  if (!(static_cast<float>(h) >= smallest)) h = Eigen::half(smallest);
  return h;
}

}  // namespace

double distill_ce(const InferenceModel& teacher, const InferenceModel& student, const Corpus& corpus) {
  if (corpus.empty()) throw InputError("distillation corpus is empty");
  double total = 0.0;
  double rows = 0.0;
  for (const auto& seq : corpus) {
    const MatrixD p = softmax_rows(forward_logits(teacher, seq));
    total += soft_ce(p, forward_logits(student, seq));
    rows += static_cast<double>(seq.size());
  }
  return total / rows;
}

DistillResult distill_scales(const Model& teacher, const QuantizedModel& student, const Corpus& corpus,
                             const DistillConfig& cfg, const ProgressFn& progress) {
  if (cfg.epochs < 0) throw ConfigError("distillation epochs must be >= 0");
  if (!(cfg.lr > 0.0) || cfg.batch < 1) throw ConfigError("distillation needs lr > 0 and batch >= 1");
  if (corpus.empty()) throw InputError("distillation corpus is empty");
  if (student.runtime.apply_r3 || student.runtime.apply_r4) throw ConfigError("distillation does not support runtime transforms");
  const CodebookCache cache(student);
  std::vector<TcqLayer> layers;
  for (std::size_t i = 0; i < student.layers.size(); ++i) {
    const QuantizedLayer& q = student.layers[i];
    if (q.encoding != "tcq" || q.su.empty() || q.sv.empty()) {
      throw ConfigError("distillation needs a student whose layers all carry SU/SV vectors");
    }
    TcqLayer l;
    l.index = i;
    l.t_in = hadamard_matrix(static_cast<std::size_t>(q.cols), q.in_seed);
    l.t_out = hadamard_matrix(static_cast<std::size_t>(q.rows), q.out_seed);
    const Trellis& trellis = cache.trellis(q.codebook);
    l.values.resize(q.rows, q.cols);
    for (int r = 0; r < q.rows; ++r) {
      const std::vector<double> v = tcq_decode(
          std::span<const std::uint32_t>(q.streams.at(0).values.data() + static_cast<std::size_t>(r) * q.cols, static_cast<std::size_t>(q.cols)),
          trellis);
      for (int c = 0; c < q.cols; ++c) l.values(r, c) = v[static_cast<std::size_t>(c)];
    }
    layers.push_back(std::move(l));
  }

  const auto teacher_im = make_inference(teacher);
  std::vector<Matrix> teacher_probs;
  for (const auto& seq : corpus) teacher_probs.push_back(softmax_rows(forward_logits(*teacher_im, seq)).cast<float>());

  std::vector<VectorD> su(layers.size());
  std::vector<VectorD> sv(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const QuantizedLayer& q = student.layers[layers[i].index];
    su[i].resize(q.rows);
    sv[i].resize(q.cols);
    for (int r = 0; r < q.rows; ++r) su[i](r) = static_cast<float>(q.su[static_cast<std::size_t>(r)]);
    for (int c = 0; c < q.cols; ++c) sv[i](c) = static_cast<float>(q.sv[static_cast<std::size_t>(c)]);
  }

  auto snapshot = [&]() {
    QuantizedModel out = student;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      QuantizedLayer& q = out.layers[layers[i].index];
      for (int r = 0; r < q.rows; ++r) q.su[static_cast<std::size_t>(r)] = to_half_positive(su[i](r));
      for (int c = 0; c < q.cols; ++c) q.sv[static_cast<std::size_t>(c)] = to_half_positive(sv[i](c));
    }
    return out;
  };
  auto evaluate = [&](const QuantizedModel& qm) { return distill_ce(*teacher_im, *make_inference(decompress_model(qm)), corpus); };

  DistillResult result;
  result.student = student;
  const double initial = evaluate(student);
  result.ce_trace.push_back(initial);
  double best = initial;
  if (progress) progress("epoch=0 ce=" + fmt(initial));

  Model dense = decompress_model(student);
  std::vector<VectorD> m_su(layers.size()), v_su(layers.size()), m_sv(layers.size()), v_sv(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    m_su[i] = v_su[i] = VectorD::Zero(su[i].size());
    m_sv[i] = v_sv[i] = VectorD::Zero(sv[i].size());
  }
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  long step = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t start = 0; start < corpus.size(); start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end = std::min(corpus.size(), start + static_cast<std::size_t>(cfg.batch));
      for (std::size_t i = 0; i < layers.size(); ++i) {
        const QuantizedLayer& q = student.layers[layers[i].index];
        dense.layers[static_cast<std::size_t>(q.layer)].weight(q.kind) = effective_weight(layers[i], su[i], sv[i]);
      }
      Model grads = zeros_like(dense);
      for (std::size_t s = start; s < end; ++s) {
        const Matrix& p = teacher_probs[s];
        const LossFn loss = [&p](const Matrix& logits, Matrix& grad) {
          double total = 0.0;
          grad.resize(logits.rows(), logits.cols());
          const auto n = static_cast<float>(logits.rows());
          for (Eigen::Index t = 0; t < logits.rows(); ++t) {
            const VectorD lq = log_softmax(logits.row(t).cast<double>().transpose());
            total -= p.row(t).cast<double>().dot(lq);
            grad.row(t) = (lq.array().exp().cast<float>().transpose() - p.row(t).array()) / n;
          }
          return total / static_cast<double>(logits.rows());
        };
        const double l = forward_backward(dense, corpus[s], loss, grads);
        if (!std::isfinite(l)) throw DivergenceError("distillation loss is not finite at epoch " + std::to_string(epoch));
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      ++step;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
      for (std::size_t i = 0; i < layers.size(); ++i) {
        const QuantizedLayer& q = student.layers[layers[i].index];
        const MatrixD g = grads.layers[static_cast<std::size_t>(q.layer)].weight(q.kind).cast<double>() * inv;
        const MatrixD gc = (layers[i].t_out * g * layers[i].t_in.transpose()).cwiseProduct(layers[i].values);
        const VectorD g_su = gc * sv[i];
        const VectorD g_sv = gc.transpose() * su[i];
        auto adam = [&](VectorD& x, VectorD& m, VectorD& v, const VectorD& grad) {
          m = b1 * m + (1.0 - b1) * grad;
          v = b2 * v + (1.0 - b2) * grad.cwiseProduct(grad);
          x.array() -= cfg.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
        };
        adam(su[i], m_su[i], v_su[i], g_su);
        adam(sv[i], m_sv[i], v_sv[i], g_sv);
      }
    }
    // Parameters live in 16-bit storage; continue from the rounded values.
    QuantizedModel candidate = snapshot();
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const QuantizedLayer& q = candidate.layers[layers[i].index];
      for (int r = 0; r < q.rows; ++r) su[i](r) = static_cast<float>(q.su[static_cast<std::size_t>(r)]);
      for (int c = 0; c < q.cols; ++c) sv[i](c) = static_cast<float>(q.sv[static_cast<std::size_t>(c)]);
    }
    const double ce = evaluate(candidate);
    result.ce_trace.push_back(ce);
    if (progress) progress("epoch=" + std::to_string(epoch) + " ce=" + fmt(ce));
    if (!std::isfinite(ce) || ce > 2.0 * initial) {
      std::string trace;
      for (double v : result.ce_trace) trace += (trace.empty() ? "" : ",") + fmt(v);
      throw DivergenceError("distillation diverged (ce trace " + trace + ")");
    }
    if (ce < best) {
      best = ce;
      result.best_epoch = epoch;
      result.student = std::move(candidate);
    }
  }
  return result;
}

}  // namespace bq2
