#include "bq2/calibration.hpp"

#include "bq2/errors.hpp"
#include "bq2/grammar.hpp"
#include "bq2/parallel.hpp"
#include "bq2/rng.hpp"

#include <zlib.h>

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <regex>

namespace bq2 {

namespace {

constexpr std::size_t kShardSize = 8;
constexpr std::uint32_t kHessianVersion = 1;
constexpr char kHessianMagic[4] = {'B', 'Q', '2', 'H'};

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  std::uint8_t bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  out.insert(out.end(), bytes, bytes + sizeof(T));
}

template <typename T>
T get(const std::vector<std::uint8_t>& in, std::size_t& pos) {
  T value;
  std::memcpy(&value, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return value;
}

}  // namespace

void CalibConfig::validate() const {
  if (n_sequences < 1) throw ConfigError("calibration: n_sequences must be >= 1");
  if (seq_len < 2) throw ConfigError("calibration: seq_len must be >= 2");
  if (!(damping >= 0.0) || !std::isfinite(damping)) throw ConfigError("calibration: damping must be finite and >= 0");
}

Corpus generate_corpus(const CalibConfig& cfg, const Grammar& grammar) {
  cfg.validate();
  Rng rng(mix_seed(cfg.corpus_seed, 0x43414c42ULL));
  Corpus corpus;
  corpus.reserve(static_cast<std::size_t>(cfg.n_sequences));
  for (int i = 0; i < cfg.n_sequences; ++i) corpus.push_back(grammar.stream(rng, static_cast<std::size_t>(cfg.seq_len)));
  return corpus;
}

HessianSet collect_hessians(const InferenceModel& model, const Corpus& corpus, int workers) {
  if (corpus.empty()) throw CalibrationError("calibration corpus is empty");
  const ModelConfig& cfg = model.config;
  const std::size_t n_sites = static_cast<std::size_t>(cfg.n_layers) * kSublayerKinds.size();
  const std::size_t n_shards = (corpus.size() + kShardSize - 1) / kShardSize;
  std::vector<std::vector<MatrixD>> partial(n_shards);

  auto site_index = [](int layer, SublayerKind kind) {
    return static_cast<std::size_t>(layer) * kSublayerKinds.size() + static_cast<std::size_t>(kind);
  };
  std::shared_ptr<const InferenceModel> shared(std::shared_ptr<const InferenceModel>{}, &model);

  parallel_for(n_shards, workers, [&](std::size_t shard) {
    std::vector<MatrixD> sums(n_sites);
    const std::size_t begin = shard * kShardSize;
    const std::size_t end = std::min(corpus.size(), begin + kShardSize);
    for (std::size_t s = begin; s < end; ++s) {
      Session session(shared);
      session.set_observer([&](int layer, SublayerKind kind, const MatrixD& x) {
        if (!all_finite(x)) {
          for (Eigen::Index t = 0; t < x.rows(); ++t) {
            if (!x.row(t).allFinite()) {
              throw CalibrationError("non-finite activation at layer " + std::to_string(layer) + " " +
                                     std::string(sublayer_name(kind)) + ", sequence " + std::to_string(s) +
                                     ", position " + std::to_string(t));
            }
          }
        }
        MatrixD& acc = sums[site_index(layer, kind)];
        if (acc.size() == 0) acc = MatrixD::Zero(x.cols(), x.cols());
        acc.noalias() += x.transpose() * x;
      });
      session.extend(corpus[s]);
    }
    partial[shard] = std::move(sums);
  });

  std::uint64_t count = 0;
  for (const auto& seq : corpus) count += seq.size();
  HessianSet out;
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (SublayerKind kind : kSublayerKinds) {
      const std::size_t idx = site_index(l, kind);
      MatrixD total = partial[0][idx];
      for (std::size_t shard = 1; shard < n_shards; ++shard) total += partial[shard][idx];
      total /= static_cast<double>(count);
      // Exact symmetry; the products are symmetric up to rounding.
      total = (0.5 * (total + total.transpose())).eval();
      out[{l, kind}] = HessianEntry{std::move(total), count};
    }
  }
  return out;
}

HessianSet collect_hessians(const Model& model, const Corpus& corpus, int workers) {
  return collect_hessians(*make_inference(model), corpus, workers);
}

void round_to_storage(HessianSet& set) {
  for (auto& [id, entry] : set) entry.h = entry.h.cast<float>().cast<double>();
}

MatrixD damped(const MatrixD& h, double lambda) {
  if (h.rows() != h.cols()) throw ShapeError("damped: matrix must be square");
  const double mean_diag = h.rows() > 0 ? h.diagonal().mean() : 0.0;
  const double add = lambda * (mean_diag > 0.0 ? mean_diag : 1.0);
  MatrixD out = h;
  out.diagonal().array() += add;
  return out;
}

std::filesystem::path hessian_filename(const SublayerId& id) {
  return "layer" + std::to_string(id.layer) + "_" + std::string(sublayer_name(id.kind)) + ".hess";
}

void write_hessian_file(const std::filesystem::path& path, const HessianEntry& entry) {
  const Matrix h = entry.h.cast<float>();
  std::vector<std::uint8_t> payload(static_cast<std::size_t>(h.size()) * sizeof(float));
  std::memcpy(payload.data(), h.data(), payload.size());
  std::vector<std::uint8_t> out(kHessianMagic, kHessianMagic + 4);
  put<std::uint32_t>(out, kHessianVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(h.rows()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(h.cols()));
  put<std::uint64_t>(out, entry.count);
  out.insert(out.end(), payload.begin(), payload.end());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(crc32(0L, payload.data(), static_cast<uInt>(payload.size()))));
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

HessianEntry read_hessian_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path.string());
  const std::vector<std::uint8_t> in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  constexpr std::size_t header = 4 + 4 + 4 + 4 + 8;
  if (in.size() < header + 4) throw FormatError(path.string() + ": truncated header");
  if (std::memcmp(in.data(), kHessianMagic, 4) != 0) throw FormatError(path.string() + ": bad magic");
  std::size_t pos = 4;
  const auto version = get<std::uint32_t>(in, pos);
  if (version != kHessianVersion) throw FormatError(path.string() + ": unsupported version " + std::to_string(version));
  const auto rows = get<std::uint32_t>(in, pos);
  const auto cols = get<std::uint32_t>(in, pos);
  const auto count = get<std::uint64_t>(in, pos);
  const std::size_t bytes = static_cast<std::size_t>(rows) * cols * sizeof(float);
  if (in.size() != header + bytes + 4) throw FormatError(path.string() + ": truncated payload");
  const std::uint32_t stored = [&] {
    std::size_t p = header + bytes;
    return get<std::uint32_t>(in, p);
  }();
  const auto crc = static_cast<std::uint32_t>(crc32(0L, in.data() + header, static_cast<uInt>(bytes)));
  if (crc != stored) throw FormatError(path.string() + ": checksum mismatch");
  Matrix h(rows, cols);
  std::memcpy(h.data(), in.data() + header, bytes);
  return HessianEntry{h.cast<double>(), count};
}

void persist_hessians(const HessianSet& set, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& [id, entry] : set) write_hessian_file(dir / hessian_filename(id), entry);
}

HessianSet load_hessians(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ConfigError("Hessian directory not found: " + dir.string());
  static const std::regex pattern(R"(layer(\d+)_([a-z\-]+)\.hess)");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  HessianSet set;
  for (const auto& path : files) {
    std::smatch m;
    const std::string name = path.filename().string();
    if (!std::regex_match(name, m, pattern)) continue;
    const SublayerId id{std::stoi(m[1].str()), parse_sublayer_kind(m[2].str())};
    set[id] = read_hessian_file(path);
  }
  if (set.empty()) throw CalibrationError("no Hessian files in " + dir.string());
  return set;
}

}  // namespace bq2
