#include "bq2/errors.hpp"
#include "bq2/quantizers.hpp"
#include "bq2/rounding.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace bq2 {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "the container format assumes a little-endian host");

namespace {

constexpr int kFormatVersion = 1;
constexpr const char* kFormatName = "bq2-model";

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

class PayloadWriter {
 public:
  json add(const void* data, std::size_t bytes, const char* dtype, std::size_t count) {
    json rec = {{"offset", bytes_.size()}, {"bytes", bytes}, {"dtype", dtype}, {"count", count}};
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + bytes);
    return rec;
  }
  json add(const Matrix& m) {
    json rec = add(m.data(), static_cast<std::size_t>(m.size()) * 4, "f32", static_cast<std::size_t>(m.size()));
    rec["rows"] = m.rows();
    rec["cols"] = m.cols();
    return rec;
  }
  json add(const Vector& v) { return add(v.data(), static_cast<std::size_t>(v.size()) * 4, "f32", static_cast<std::size_t>(v.size())); }
  json add(const MatrixD& m) {
    json rec = add(m.data(), static_cast<std::size_t>(m.size()) * 8, "f64", static_cast<std::size_t>(m.size()));
    rec["rows"] = m.rows();
    rec["cols"] = m.cols();
    return rec;
  }
  json add(const std::vector<Eigen::half>& v) { return add(v.data(), v.size() * 2, "f16", v.size()); }
  json add(const CodeStream& s) {
    const std::vector<std::uint8_t> packed = pack_codes(s);
    json rec = add(packed.data(), packed.size(), "packed", s.values.size());
    rec["bits"] = s.bits;
    return rec;
  }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

static_assert(sizeof(Eigen::half) == 2);

class PayloadReader {
 public:
  explicit PayloadReader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  std::span<const std::uint8_t> span(const json& rec, const char* dtype) const {
    try {
      if (rec.at("dtype").get<std::string>() != dtype) throw FormatError(std::string("expected a tensor of type ") + dtype);
      const auto off = rec.at("offset").get<std::size_t>();
      const auto n = rec.at("bytes").get<std::size_t>();
      if (off > bytes_.size() || n > bytes_.size() - off) throw FormatError("tensor extends past the end of the payload");
      return {bytes_.data() + off, n};
    } catch (const json::exception& e) {
      throw FormatError(std::string("malformed tensor record: ") + e.what());
    }
  }
  template <typename T>
  void copy(const json& rec, const char* dtype, T* out, std::size_t count) const {
    const auto s = span(rec, dtype);
    if (s.size() != count * sizeof(T)) throw FormatError("tensor size does not match its shape");
    if (count > 0) std::memcpy(out, s.data(), s.size());
  }
  Matrix matrix(const json& rec) const {
    Matrix m(rec.at("rows").get<Eigen::Index>(), rec.at("cols").get<Eigen::Index>());
    copy(rec, "f32", m.data(), static_cast<std::size_t>(m.size()));
    return m;
  }
  MatrixD matrix_d(const json& rec) const {
    MatrixD m(rec.at("rows").get<Eigen::Index>(), rec.at("cols").get<Eigen::Index>());
    copy(rec, "f64", m.data(), static_cast<std::size_t>(m.size()));
    return m;
  }
  Vector vector(const json& rec) const {
    Vector v(rec.at("count").get<Eigen::Index>());
    copy(rec, "f32", v.data(), static_cast<std::size_t>(v.size()));
    return v;
  }
  std::vector<Eigen::half> halves(const json& rec) const {
    std::vector<Eigen::half> v(rec.at("count").get<std::size_t>());
    copy(rec, "f16", v.data(), v.size());
    return v;
  }
  CodeStream stream(const json& rec) const {
    return unpack_codes(span(rec, "packed"), rec.at("bits").get<int>(), rec.at("count").get<std::size_t>());
  }

 private:
  const std::vector<std::uint8_t>& bytes_;
};

std::uint64_t content_hash(const json& manifest_without_hash, const std::vector<std::uint8_t>& payload) {
  const std::uint64_t h = fnv1a64(manifest_without_hash.dump());
  return fnv1a64(std::span<const std::uint8_t>(payload.data(), payload.size()), h);
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, const void* data, std::size_t n) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) throw Error("write failed: " + path.string());
}

void check_layer(const QuantizedLayer& q) {
  const std::string name = "layer " + std::to_string(q.layer) + " " + std::string(linear_name(q.kind));
  for (Eigen::Index i = 0; i < q.scales.size(); ++i) {
    if (!(q.scales(i) > 0.0f) || !std::isfinite(q.scales(i))) throw ManifestError(name + ": scales must be finite and positive");
  }
  for (const auto& v : {q.su, q.sv})
    for (Eigen::half x : v)
      if (!(static_cast<float>(x) > 0.0f) || !std::isfinite(static_cast<float>(x))) throw ManifestError(name + ": SU/SV must be finite and positive");
}

}  // namespace

CodebookCache::CodebookCache(const QuantizedModel& qm) {
  for (const auto& [id, rec] : qm.codebooks) {
    try {
      if (rec.kind == "e8p") {
        e8p_[id] = shared_e8p(rec.params.at("size").get<std::size_t>());
      } else if (rec.kind == "trellis") {
        trellis_[id] = Trellis::bitshift(rec.params.at("n_states").get<int>(), rec.params.at("bits").get<int>());
      } else if (rec.kind == "vq") {
        if (rec.tables.size() != 2) throw ManifestError("codebook " + id + ": residual VQ needs two tables");
        VQCodebook vq;
        vq.g = rec.params.at("g").get<int>();
        vq.centroids = rec.tables[0].cast<double>();
        vq.residual = rec.tables[1].cast<double>();
        vq.validate();
        vq_[id] = std::move(vq);
      } else if (rec.kind == "aq") {
        AdditiveCodebooks aq;
        aq.g = rec.params.at("g").get<int>();
        for (const auto& t : rec.tables) aq.books.push_back(t.cast<double>());
        aq_[id] = std::move(aq);
      } else {
        throw ManifestError("codebook " + id + " has unknown kind '" + rec.kind + "'");
      }
    } catch (const json::exception& e) {
      throw ManifestError("codebook " + id + ": " + e.what());
    }
  }
}

namespace {

template <typename Map>
const auto& find_codebook(const Map& m, const std::string& id, const char* kind) {
  auto it = m.find(id);
  if (it == m.end()) throw ManifestError("unknown " + std::string(kind) + " codebook reference '" + id + "'");
  return it->second;
}

}  // namespace

const E8PCodebook& CodebookCache::e8p(const std::string& id) const { return *find_codebook(e8p_, id, "e8p"); }
const Trellis& CodebookCache::trellis(const std::string& id) const { return find_codebook(trellis_, id, "trellis"); }
const VQCodebook& CodebookCache::vq(const std::string& id) const { return find_codebook(vq_, id, "vq"); }
const AdditiveCodebooks& CodebookCache::aq(const std::string& id) const { return find_codebook(aq_, id, "aq"); }

namespace {

// Rows of the quantized core (before any transform), as stored 32-bit values
// where the format defines them; trellis cores are scaled in 64-bit.
class CoreDecoder {
 public:
  CoreDecoder(const QuantizedLayer& q, const CodebookCache& cache) : q_(q) {
    if (q.encoding == "e8p") {
      e8p_ = &cache.e8p(q.codebook);
      blocks_ = q.cols / e8p_->dim();
    } else if (q.encoding == "tcq") {
      trellis_ = &cache.trellis(q.codebook);
    } else if (q.encoding == "rvq") {
      vq_ = &cache.vq(q.codebook);
      blocks_ = q.cols / vq_->g;
    } else if (q.encoding == "aq") {
      aq_ = &cache.aq(q.codebook);
      blocks_ = q.cols / aq_->g;
      if (static_cast<int>(q.streams.size()) != aq_->m()) throw ManifestError("additive layer stream count mismatch");
    } else if (q.encoding != "scalar" && q.encoding != "dense") {
      throw ManifestError("unknown encoding '" + q.encoding + "'");
    }
    check_sizes();
  }

  void row(int r, std::span<double> out) const {
    const auto cols = static_cast<std::size_t>(q_.cols);
    if (q_.encoding == "dense") {
      for (std::size_t c = 0; c < cols; ++c) out[c] = q_.dense(r, static_cast<Eigen::Index>(c));
    } else if (q_.encoding == "scalar") {
      const ScalarGrid grid = ScalarGrid::two_bit();
      const float s = q_.scales(r);
      for (std::size_t c = 0; c < cols; ++c)
        out[c] = static_cast<double>(s * static_cast<float>(grid.levels[q_.streams[0].values[r * cols + c]]));
    } else if (q_.encoding == "e8p") {
      const float s = q_.scales(r);
      std::array<double, 8> e{};
      for (int b = 0; b < blocks_; ++b) {
        e8p_->decode(q_.streams[0].values[static_cast<std::size_t>(r * blocks_ + b)], e);
        for (int j = 0; j < 8; ++j) out[static_cast<std::size_t>(b * 8 + j)] = static_cast<double>(s * static_cast<float>(e[static_cast<std::size_t>(j)]));
      }
    } else if (q_.encoding == "tcq") {
      const std::vector<double> v = tcq_decode(
          std::span<const std::uint32_t>(q_.streams[0].values.data() + static_cast<std::size_t>(r) * cols, cols), *trellis_);
      const double su = static_cast<float>(q_.su[static_cast<std::size_t>(r)]);
      for (std::size_t c = 0; c < cols; ++c) out[c] = su * v[c] * static_cast<float>(q_.sv[c]);
    } else if (q_.encoding == "rvq") {
      const float s = q_.scales(r);
      const int g = vq_->g;
      for (int b = 0; b < blocks_; ++b) {
        const auto gi = static_cast<std::size_t>(r * blocks_ + b);
        for (int c = 0; c < g; ++c) {
          const auto cp = static_cast<float>(vq_->centroids(q_.streams[0].values[gi], c));
          const auto cr = static_cast<float>(vq_->residual(q_.streams[1].values[gi], c));
          out[static_cast<std::size_t>(b * g + c)] = static_cast<double>(s * (cp + cr));
        }
      }
    } else {
      const int g = aq_->g;
      for (int b = 0; b < blocks_; ++b) {
        const auto gi = static_cast<std::size_t>(r * blocks_ + b);
        for (int c = 0; c < g; ++c) {
          float acc = 0.0f;
          for (int k = 0; k < aq_->m(); ++k) {
            acc += static_cast<float>(aq_->books[static_cast<std::size_t>(k)](q_.streams[static_cast<std::size_t>(k)].values[gi], c));
          }
          out[static_cast<std::size_t>(b * g + c)] = acc;
        }
      }
    }
  }

 private:
  void check_sizes() const {
    const auto n = q_.weight_count();
    const std::string name = "layer " + std::to_string(q_.layer) + " " + std::string(linear_name(q_.kind));
    auto expect = [&](std::size_t got, std::size_t want) {
      if (got != want) throw ManifestError(name + ": code stream does not cover the weight count");
    };
    if (q_.encoding == "dense") {
      expect(static_cast<std::size_t>(q_.dense.size()), n);
      return;
    }
    if (q_.streams.empty()) throw ManifestError(name + ": no code stream");
    if (blocks_ > 0 && q_.cols % blocks_ != 0) throw ManifestError(name + ": group size does not divide the columns");
    const bool per_weight = q_.encoding == "scalar" || q_.encoding == "tcq";
    const std::size_t want = per_weight ? n : static_cast<std::size_t>(q_.rows) * static_cast<std::size_t>(blocks_);
    for (const auto& s : q_.streams) expect(s.values.size(), want);
    if (q_.encoding == "tcq") {
      if (q_.su.size() != static_cast<std::size_t>(q_.rows) || q_.sv.size() != static_cast<std::size_t>(q_.cols)) {
        throw ManifestError(name + ": SU/SV sizes do not match the layer");
      }
    } else if (q_.scales.size() != q_.rows && q_.encoding != "aq") {
      throw ManifestError(name + ": one scale per row required");
    }
  }

  const QuantizedLayer& q_;
  const E8PCodebook* e8p_ = nullptr;
  const Trellis* trellis_ = nullptr;
  const VQCodebook* vq_ = nullptr;
  const AdditiveCodebooks* aq_ = nullptr;
  int blocks_ = 0;
};

MatrixD decode_core(const QuantizedLayer& q, const CodebookCache& cache) {
  const CoreDecoder dec(q, cache);
  MatrixD core(q.rows, q.cols);
  for (int r = 0; r < q.rows; ++r) dec.row(r, std::span<double>(core.row(r).data(), static_cast<std::size_t>(q.cols)));
  return core;
}

}  // namespace

MatrixD decode_layer(const QuantizedLayer& q, const CodebookCache& cache) {
  MatrixD core = decode_core(q, cache);
  if (q.butterfly.n > 0) core = core * butterfly_matrix(q.butterfly);
  if (q.encoding == "tcq") {
    core = hadamard_matrix(static_cast<std::size_t>(q.rows), q.out_seed).transpose() * core *
           hadamard_matrix(static_cast<std::size_t>(q.cols), q.in_seed);
  }
  return core;
}

Model decompress_model(const QuantizedModel& qm) {
  qm.config.validate();
  const CodebookCache cache(qm);
  Model m;
  m.config = qm.config;
  m.runtime = qm.runtime;
  m.embedding = qm.embedding;
  m.lm_head = qm.lm_head;
  m.final_norm = qm.final_norm;
  m.layers.resize(static_cast<std::size_t>(qm.config.n_layers));
  if (qm.layers.size() != static_cast<std::size_t>(qm.config.n_layers) * kLinearKinds.size()) {
    throw ManifestError("manifest layer set does not match the model");
  }
  for (int l = 0; l < qm.config.n_layers; ++l) {
    LayerWeights& w = m.layers[static_cast<std::size_t>(l)];
    w.attn_norm = qm.attn_norm.at(static_cast<std::size_t>(l));
    w.ffn_norm = qm.ffn_norm.at(static_cast<std::size_t>(l));
    for (LinearKind k : kLinearKinds) {
      const QuantizedLayer& q = qm.layer(l, k);
      w.weight(k) = q.encoding == "dense" ? q.dense : Matrix(decode_layer(q, cache).cast<float>());
    }
  }
  return m;
}

namespace {

class CodeBackend final : public LinearBackend {
 public:
  explicit CodeBackend(std::shared_ptr<const QuantizedModel> qm) : qm_(std::move(qm)), cache_(*qm_) {
    for (const auto& q : qm_->layers) {
      decoders_.emplace_back(q, cache_);
      index_[{q.layer, q.kind}] = decoders_.size() - 1;
      if (q.encoding == "tcq") {
        in_signs_.push_back(hadamard_signs(static_cast<std::size_t>(q.cols), q.in_seed));
        out_signs_.push_back(hadamard_signs(static_cast<std::size_t>(q.rows), q.out_seed));
      } else {
        in_signs_.emplace_back();
        out_signs_.emplace_back();
      }
    }
  }

  MatrixD apply(int layer, LinearKind kind, const MatrixD& x) const override {
    const std::size_t i = index_.at({layer, kind});
    const QuantizedLayer& q = qm_->layers[i];
    if (q.encoding == "dense") return x * q.dense.cast<double>().transpose();
    const bool tcq = q.encoding == "tcq";
    MatrixD xin = x;
    for (Eigen::Index t = 0; t < xin.rows(); ++t) {
      std::span<double> row(xin.row(t).data(), static_cast<std::size_t>(xin.cols()));
      if (q.butterfly.n > 0) butterfly_apply_inplace(q.butterfly, row);
      if (tcq) hadamard_inplace(row, in_signs_[i]);
    }
    MatrixD y(x.rows(), q.rows);
    VectorD wrow(q.cols);
    for (int r = 0; r < q.rows; ++r) {
      decoders_[i].row(r, std::span<double>(wrow.data(), static_cast<std::size_t>(q.cols)));
      y.col(r) = xin * wrow;
    }
    if (tcq) {
      for (Eigen::Index t = 0; t < y.rows(); ++t) {
        inverse_hadamard_inplace(std::span<double>(y.row(t).data(), static_cast<std::size_t>(y.cols())), out_signs_[i]);
      }
    }
    return y;
  }

 private:
  std::shared_ptr<const QuantizedModel> qm_;
  CodebookCache cache_;
  std::vector<CoreDecoder> decoders_;
  std::map<std::pair<int, LinearKind>, std::size_t> index_;
  std::vector<std::vector<float>> in_signs_;
  std::vector<std::vector<float>> out_signs_;
};

}  // namespace

std::shared_ptr<const InferenceModel> code_level_model(const QuantizedModel& qm) {
  auto owned = std::make_shared<const QuantizedModel>(qm);
  Model shell;
  shell.config = qm.config;
  shell.runtime = qm.runtime;
  shell.embedding = qm.embedding;
  shell.lm_head = qm.lm_head;
  shell.final_norm = qm.final_norm;
  for (int l = 0; l < qm.config.n_layers; ++l) {
    LayerWeights w;
    w.attn_norm = qm.attn_norm.at(static_cast<std::size_t>(l));
    w.ffn_norm = qm.ffn_norm.at(static_cast<std::size_t>(l));
    shell.layers.push_back(std::move(w));
  }
  return make_inference(shell, std::make_shared<CodeBackend>(owned));
}

RotationSpec rotation_spec(const QuantizedModel& qm) {
  RotationSpec spec = qm.rotation;
  spec.runtime = qm.runtime;
  return spec;
}

std::uint64_t code_hash(const QuantizedModel& qm) {
  std::uint64_t h = fnv1a64(std::string_view("codes"));
  for (const auto& q : qm.layers) {
    for (const auto& s : q.streams) {
      const std::vector<std::uint8_t> packed = pack_codes(s);
      h = fnv1a64(std::span<const std::uint8_t>(packed.data(), packed.size()), h);
    }
  }
  return h;
}

void save_quantized(const QuantizedModel& qm, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  PayloadWriter pw;
  json m;
  m["format"] = kFormatName;
  m["format_version"] = kFormatVersion;
  m["config_hash"] = qm.config_hash;
  m["model"] = model_config_to_json(qm.config);
  m["method"] = method_to_json(qm.method);
  m["rotation"] = rotation_to_json(qm.rotation);
  m["runtime"] = {{"apply_r3", qm.runtime.apply_r3},
                  {"apply_r4", qm.runtime.apply_r4},
                  {"r3_seed", qm.runtime.r3_seed},
                  {"r4_seed", qm.runtime.r4_seed}};
  json fp;
  fp["embedding"] = pw.add(qm.embedding);
  fp["lm_head"] = pw.add(qm.lm_head);
  fp["final_norm"] = pw.add(qm.final_norm);
  json norms = json::array();
  for (std::size_t l = 0; l < qm.attn_norm.size(); ++l) norms.push_back({{"attn", pw.add(qm.attn_norm[l])}, {"ffn", pw.add(qm.ffn_norm[l])}});
  fp["norms"] = norms;
  m["fp_kept"] = fp;
  if (qm.rotation.kind == RotationKind::learned_orthogonal) {
    json rot;
    rot["r1"] = pw.add(qm.rotation.r1);
    json r2 = json::array();
    for (const auto& layer : qm.rotation.r2) {
      json per = json::array();
      for (const auto& r : layer) per.push_back(pw.add(r));
      r2.push_back(per);
    }
    rot["r2"] = r2;
    m["rotation_tensors"] = rot;
  }
  json cbs = json::array();
  for (const auto& [id, rec] : qm.codebooks) {
    json tables = json::array();
    for (const auto& t : rec.tables) tables.push_back(pw.add(t));
    cbs.push_back({{"id", id}, {"kind", rec.kind}, {"params", rec.params}, {"tables", tables}});
  }
  m["codebooks"] = cbs;
  json layers = json::array();
  for (const auto& q : qm.layers) {
    json rec;
    rec["layer"] = q.layer;
    rec["kind"] = linear_name(q.kind);
    rec["rows"] = q.rows;
    rec["cols"] = q.cols;
    rec["encoding"] = q.encoding;
    rec["codebook"] = q.codebook;
    rec["proxy_error"] = q.proxy_error;
    if (q.primary_proxy_error >= 0.0) rec["primary_proxy_error"] = q.primary_proxy_error;
    json streams = json::array();
    for (const auto& s : q.streams) streams.push_back(pw.add(s));
    rec["streams"] = streams;
    if (q.scales.size() > 0) rec["scales"] = pw.add(q.scales);
    if (!q.su.empty()) rec["su"] = pw.add(q.su);
    if (!q.sv.empty()) rec["sv"] = pw.add(q.sv);
    if (q.encoding == "tcq") {
      rec["in_seed"] = q.in_seed;
      rec["out_seed"] = q.out_seed;
    }
    if (q.butterfly.n > 0) {
      std::vector<float> flat;
      for (const auto& st : q.butterfly.stages)
        for (double a : st) flat.push_back(static_cast<float>(a));
      json b = pw.add(flat.data(), flat.size() * 4, "f32", flat.size());
      b["n"] = q.butterfly.n;
      rec["butterfly"] = b;
    }
    if (q.encoding == "dense") rec["dense"] = pw.add(q.dense);
    layers.push_back(rec);
  }
  m["layers"] = layers;
  m["payload_bytes"] = pw.bytes().size();
  m["content_hash"] = hex64(content_hash(m, pw.bytes()));
  const std::string text = m.dump(2) + "\n";
  write_file(dir / "payload.bin", pw.bytes().data(), pw.bytes().size());
  write_file(dir / "manifest.json", text.data(), text.size());
}

QuantizedModel load_quantized(const std::filesystem::path& dir) {
  const std::vector<std::uint8_t> raw = read_file(dir / "manifest.json");
  json m;
  try {
    m = json::parse(raw.begin(), raw.end());
  } catch (const json::exception& e) {
    throw ManifestError(std::string("manifest is not valid JSON: ") + e.what());
  }
  const std::vector<std::uint8_t> payload = read_file(dir / "payload.bin");
  QuantizedModel qm;
  try {
    if (m.value("format", std::string{}) != kFormatName) throw ManifestError("not a model container");
    if (m.at("format_version").get<int>() != kFormatVersion) {
      throw ManifestError("unsupported format version " + m.at("format_version").dump());
    }
    const std::string stored = m.at("content_hash").get<std::string>();
    json body = m;
    body.erase("content_hash");
    if (hex64(content_hash(body, payload)) != stored) throw ManifestError("content hash mismatch");
    if (m.at("payload_bytes").get<std::size_t>() != payload.size()) throw ManifestError("payload size mismatch");

    const PayloadReader pr(payload);
    qm.config_hash = m.at("config_hash").get<std::string>();
    qm.config = model_config_from_json(m.at("model"));
    qm.method = method_from_json(m.at("method"));
    qm.rotation = rotation_from_json(m.at("rotation"));
    const json& rt = m.at("runtime");
    qm.runtime = {rt.at("apply_r3").get<bool>(), rt.at("apply_r4").get<bool>(), rt.at("r3_seed").get<std::uint64_t>(),
                  rt.at("r4_seed").get<std::uint64_t>()};
    const json& fp = m.at("fp_kept");
    qm.embedding = pr.matrix(fp.at("embedding"));
    qm.lm_head = pr.matrix(fp.at("lm_head"));
    qm.final_norm = pr.vector(fp.at("final_norm"));
    for (const auto& n : fp.at("norms")) {
      qm.attn_norm.push_back(pr.vector(n.at("attn")));
      qm.ffn_norm.push_back(pr.vector(n.at("ffn")));
    }
    if (m.contains("rotation_tensors")) {
      const json& rot = m.at("rotation_tensors");
      qm.rotation.r1 = pr.matrix_d(rot.at("r1"));
      for (const auto& layer : rot.at("r2")) {
        std::vector<MatrixD> per;
        for (const auto& r : layer) per.push_back(pr.matrix_d(r));
        qm.rotation.r2.push_back(std::move(per));
      }
    }
    for (const auto& c : m.at("codebooks")) {
      CodebookRecord rec;
      rec.id = c.at("id").get<std::string>();
      rec.kind = c.at("kind").get<std::string>();
      rec.params = c.at("params");
      for (const auto& t : c.at("tables")) rec.tables.push_back(pr.matrix(t));
      qm.codebooks[rec.id] = std::move(rec);
    }
    for (const auto& rec : m.at("layers")) {
      QuantizedLayer q;
      q.layer = rec.at("layer").get<int>();
      q.kind = parse_linear_kind(rec.at("kind").get<std::string>());
      q.rows = rec.at("rows").get<int>();
      q.cols = rec.at("cols").get<int>();
      q.encoding = rec.at("encoding").get<std::string>();
      q.codebook = rec.at("codebook").get<std::string>();
      if (!q.codebook.empty() && !qm.codebooks.count(q.codebook)) {
        throw ManifestError("layer " + std::to_string(q.layer) + " " + std::string(linear_name(q.kind)) +
                            " references unknown codebook '" + q.codebook + "'");
      }
      q.proxy_error = rec.at("proxy_error").get<double>();
      q.primary_proxy_error = rec.value("primary_proxy_error", -1.0);
      for (const auto& s : rec.at("streams")) q.streams.push_back(pr.stream(s));
      if (rec.contains("scales")) q.scales = pr.vector(rec.at("scales"));
      if (rec.contains("su")) q.su = pr.halves(rec.at("su"));
      if (rec.contains("sv")) q.sv = pr.halves(rec.at("sv"));
      q.in_seed = rec.value("in_seed", std::uint64_t{0});
      q.out_seed = rec.value("out_seed", std::uint64_t{0});
      if (rec.contains("butterfly")) {
        const json& b = rec.at("butterfly");
        std::vector<float> flat(b.at("count").get<std::size_t>());
        pr.copy(b, "f32", flat.data(), flat.size());
        q.butterfly = ButterflyAngles::zeros(b.at("n").get<std::size_t>());
        if (flat.size() != q.butterfly.parameter_count()) throw ManifestError("butterfly parameter count mismatch");
        std::size_t at = 0;
        for (auto& st : q.butterfly.stages)
          for (double& a : st) a = flat[at++];
      }
      if (rec.contains("dense")) q.dense = pr.matrix(rec.at("dense"));
      check_layer(q);
      qm.layers.push_back(std::move(q));
    }
  } catch (const json::exception& e) {
    throw ManifestError(std::string("malformed manifest: ") + e.what());
  }
  if (qm.layers.size() != static_cast<std::size_t>(qm.config.n_layers) * kLinearKinds.size()) {
    throw ManifestError("manifest layer set does not match the model");
  }
  // Validates every stream against its codebook.
  const CodebookCache cache(qm);
  for (const auto& q : qm.layers) CoreDecoder(q, cache);
  return qm;
}

void save_checkpoint(const Model& model, const std::filesystem::path& dir, const std::string& config_hash) {
  QuantizedModel qm = make_checkpoint(model);
  qm.config_hash = config_hash;
  save_quantized(qm, dir);
}

Model load_checkpoint(const std::filesystem::path& dir) { return decompress_model(load_quantized(dir)); }

SizeReport account_size(const SizeInputs& in) {
  SizeReport r;
  r.payload_bytes = in.code_bytes + in.codebook_bytes + in.scale_bytes;
  r.total_bytes = r.payload_bytes + in.fp_bytes;
  r.bpw = in.weight_count > 0.0 ? 8.0 * r.payload_bytes / in.weight_count : 0.0;
  r.compression_ratio = r.total_bytes > 0.0 ? in.reference_bytes / r.total_bytes : 0.0;
  return r;
}

SizeReport account_size(const QuantizedModel& qm) {
  std::map<std::string, std::size_t> users;
  std::size_t weights = 0;
  for (const auto& q : qm.layers) {
    weights += q.weight_count();
    if (!q.codebook.empty()) users[q.codebook] += q.weight_count();
  }
  std::map<std::string, double> codebook_bytes;
  for (const auto& [id, rec] : qm.codebooks) {
    double b = 0.0;
    for (const auto& t : rec.tables) b += 4.0 * static_cast<double>(t.size());
    codebook_bytes[id] = b;
  }
  SizeInputs total;
  std::map<std::string, std::pair<double, double>> by_kind;  // payload bytes, weights
  for (const auto& q : qm.layers) {
    double code = 0.0;
    for (const auto& s : q.streams) code += std::ceil(static_cast<double>(s.values.size()) * s.bits / 8.0);
    if (q.encoding == "dense") code += 4.0 * static_cast<double>(q.dense.size());
    double scale = 4.0 * static_cast<double>(q.scales.size()) + 2.0 * static_cast<double>(q.su.size() + q.sv.size()) +
                   4.0 * static_cast<double>(q.butterfly.parameter_count());
    // Shared codebooks are attributed in proportion to the weights they serve.
    double cb = 0.0;
    if (!q.codebook.empty()) {
      cb = codebook_bytes[q.codebook] * static_cast<double>(q.weight_count()) / static_cast<double>(users[q.codebook]);
    }
    total.code_bytes += code;
    total.scale_bytes += scale;
    total.codebook_bytes += cb;
    auto& k = by_kind[std::string(linear_name(q.kind))];
    k.first += code + scale + cb;
    k.second += static_cast<double>(q.weight_count());
  }
  double fp_params = static_cast<double>(qm.embedding.size() + qm.lm_head.size() + qm.final_norm.size());
  for (const auto& v : qm.attn_norm) fp_params += static_cast<double>(v.size());
  for (const auto& v : qm.ffn_norm) fp_params += static_cast<double>(v.size());
  total.fp_bytes = 4.0 * fp_params;
  total.weight_count = static_cast<double>(weights);
  total.reference_bytes = 2.0 * (fp_params + static_cast<double>(weights));
  SizeReport r = account_size(total);
  for (const auto& [kind, pw] : by_kind) r.bpw_by_kind[kind] = 8.0 * pw.first / pw.second;
  return r;
}

}  // namespace bq2
