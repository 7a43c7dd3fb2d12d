#include "stepflow/neural.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "stepflow/errors.hpp"
#include "stepflow/rng.hpp"

namespace stepflow {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr char kCheckpointMagic[] = "stepflow-checkpoint 1";

using Eigen::MatrixXd;
using Eigen::VectorXd;
using ConstMap = Eigen::Map<const MatrixXd>;
using MutMap = Eigen::Map<MatrixXd>;

ConstMap view(const VectorXd& params, const TensorSlot& s) {
  return ConstMap(params.data() + s.offset, s.rows, s.cols);
}

MutMap view(VectorXd& params, const TensorSlot& s) {
  return MutMap(params.data() + s.offset, s.rows, s.cols);
}

MatrixXd silu(const MatrixXd& x) {
  return x.unaryExpr([](double v) { return v / (1.0 + std::exp(-v)); });
}

MatrixXd silu_grad(const MatrixXd& x) {
  return x.unaryExpr([](double v) {
    const double sig = 1.0 / (1.0 + std::exp(-v));
    return sig * (1.0 + v * (1.0 - sig));
  });
}

// Column-wise layer norm without affine parameters.
void layer_norm(const MatrixXd& x, MatrixXd& normalized, MatrixXd& inv_std) {
  const Eigen::RowVectorXd mean = x.colwise().mean();
  normalized = x.rowwise() - mean;
  const Eigen::RowVectorXd var = normalized.array().square().colwise().mean();
  inv_std = (var.array() + kLayerNormEps).rsqrt().matrix();
  normalized = normalized * inv_std.row(0).asDiagonal();
}

MatrixXd layer_norm_backward(const MatrixXd& dn, const MatrixXd& normalized, const MatrixXd& inv_std) {
  const Eigen::RowVectorXd mean_dn = dn.colwise().mean();
  const Eigen::RowVectorXd mean_dn_n = dn.cwiseProduct(normalized).colwise().mean();
  MatrixXd dx = dn.rowwise() - mean_dn;
  dx -= normalized * mean_dn_n.asDiagonal();
  return dx * inv_std.row(0).asDiagonal();
}

std::string block_name(int k, const char* suffix) {
  return "block" + std::to_string(k) + "." + suffix;
}

}  // namespace

void validate(const NeuralDenoiserSpec& spec) {
  if (spec.vocab_size < 1 || spec.length < 1 || spec.embed_dim < 1 || spec.hidden_dim < 1 ||
      spec.depth < 0 || spec.cond_dim < 1 || spec.freq_dim < 2 || spec.freq_dim % 2 != 0) {
    throw ConfigError("invalid neural denoiser dimensions");
  }
  if (spec.masked_target && (*spec.masked_target < 0 || *spec.masked_target >= spec.vocab_size)) {
    throw ConfigError("masked_target outside vocabulary");
  }
}

ParameterLayout::ParameterLayout(const NeuralDenoiserSpec& spec) {
  validate(spec);
  const Eigen::Index H = spec.hidden_dim;
  const Eigen::Index C = spec.cond_dim;
  add("embed", spec.vocab_size, spec.embed_dim);
  add("in.w", H, static_cast<Eigen::Index>(spec.length) * spec.embed_dim);
  add("in.b", H, 1);
  add("time.w", C, spec.freq_dim);
  add("time.b", C, 1);
  add("step.w", C, spec.freq_dim);
  add("step.b", C, 1);
  add("fuse.w", C, 2 * C);
  add("fuse.b", C, 1);
  for (int k = 0; k < spec.depth; ++k) {
    add(block_name(k, "mod.w"), 2 * H, C);
    add(block_name(k, "mod.b"), 2 * H, 1);
    add(block_name(k, "fc1.w"), H, H);
    add(block_name(k, "fc1.b"), H, 1);
    add(block_name(k, "fc2.w"), H, H);
    add(block_name(k, "fc2.b"), H, 1);
  }
  add("final.mod.w", 2 * H, C);
  add("final.mod.b", 2 * H, 1);
  add("head.w", static_cast<Eigen::Index>(spec.length) * spec.vocab_size, H);
  add("head.b", static_cast<Eigen::Index>(spec.length) * spec.vocab_size, 1);
}

void ParameterLayout::add(std::string name, Eigen::Index rows, Eigen::Index cols) {
  slots_.push_back({std::move(name), rows, cols, total_});
  total_ += rows * cols;
}

const TensorSlot& ParameterLayout::slot(const std::string& name) const {
  for (const auto& s : slots_) {
    if (s.name == name) return s;
  }
  throw ConfigError("unknown parameter tensor '" + name + "'");
}

VectorXd init_parameters(const NeuralDenoiserSpec& spec, std::uint64_t seed) {
  const ParameterLayout layout(spec);
  VectorXd params = VectorXd::Zero(layout.total_size());
  Rng rng = Rng::stream(seed, {0x1417});
  for (const auto& s : layout.slots()) {
    const bool is_bias = s.cols == 1 && s.name.ends_with(".b");
    if (is_bias || s.name.starts_with("head.")) continue;
    const double fan_in = s.name == "embed" ? 1.0 : static_cast<double>(s.cols);
    const double limit = std::sqrt(3.0 / fan_in);
    auto w = view(params, s);
    for (Eigen::Index j = 0; j < s.cols; ++j) {
      for (Eigen::Index i = 0; i < s.rows; ++i) w(i, j) = rng.uniform(-limit, limit);
    }
  }
  return params;
}

VectorXd sinusoidal_features(double x, int freq_dim) {
  const int half = freq_dim / 2;
  VectorXd out(freq_dim);
  for (int k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(1000.0) * k / half);
    const double arg = 1000.0 * x * freq;
    out[k] = std::sin(arg);
    out[half + k] = std::cos(arg);
  }
  return out;
}

double step_feature(double h) {
  if (!(h > 0.0)) throw DomainError("step size must be positive");
  return -std::log2(h) / 10.0;
}

MatrixXd neural_forward_batch(const NeuralDenoiserSpec& spec, const ParameterLayout& layout,
                              const VectorXd& params, const std::vector<Sequence>& z,
                              const std::vector<double>& t, const std::vector<double>& h,
                              ForwardCache* cache) {
  if (params.size() != layout.total_size()) {
    throw ConfigError("parameter vector does not match the denoiser layout");
  }
  if (z.size() != t.size() || z.size() != h.size()) {
    throw ValidationError("neural forward: batch fields differ in count");
  }
  const auto B = static_cast<Eigen::Index>(z.size());
  const Eigen::Index E = spec.embed_dim;
  const Eigen::Index H = spec.hidden_dim;
  const Eigen::Index C = spec.cond_dim;

  const auto embed = view(params, layout.slot("embed"));
  MatrixXd embedded(static_cast<Eigen::Index>(spec.length) * E, B);
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto& seq = z[static_cast<std::size_t>(b)];
    if (seq.size() != static_cast<std::size_t>(spec.length)) {
      throw ConfigError("neural forward: sequence length does not match the denoiser");
    }
    for (int i = 0; i < spec.length; ++i) {
      if (seq[i] < 0 || seq[i] >= spec.vocab_size) {
        throw ValidationError("neural forward: token outside vocabulary");
      }
      embedded.block(i * E, b, E, 1) = embed.row(seq[i]).transpose();
    }
  }

  MatrixXd time_features(spec.freq_dim, B), step_features(spec.freq_dim, B);
  for (Eigen::Index b = 0; b < B; ++b) {
    time_features.col(b) = sinusoidal_features(t[static_cast<std::size_t>(b)], spec.freq_dim);
    step_features.col(b) =
        sinusoidal_features(step_feature(h[static_cast<std::size_t>(b)]), spec.freq_dim);
  }

  MatrixXd time_pre = view(params, layout.slot("time.w")) * time_features;
  time_pre.colwise() += view(params, layout.slot("time.b")).col(0);
  MatrixXd step_pre = view(params, layout.slot("step.w")) * step_features;
  step_pre.colwise() += view(params, layout.slot("step.b")).col(0);
  MatrixXd fused_in(2 * C, B);
  fused_in.topRows(C) = silu(time_pre);
  fused_in.bottomRows(C) = silu(step_pre);
  MatrixXd cond_pre = view(params, layout.slot("fuse.w")) * fused_in;
  cond_pre.colwise() += view(params, layout.slot("fuse.b")).col(0);
  MatrixXd cond = silu(cond_pre);

  MatrixXd x = view(params, layout.slot("in.w")) * embedded;
  x.colwise() += view(params, layout.slot("in.b")).col(0);

  ForwardCache local;
  ForwardCache& fc = cache ? *cache : local;
  fc.block_in.assign(spec.depth, {});
  fc.modulation.assign(spec.depth, {});
  fc.normalized.assign(spec.depth, {});
  fc.inv_std.assign(spec.depth, {});
  fc.modulated.assign(spec.depth, {});
  fc.fc1_pre.assign(spec.depth, {});
  fc.fc1_act.assign(spec.depth, {});

  for (int k = 0; k < spec.depth; ++k) {
    fc.block_in[k] = x;
    MatrixXd mod = view(params, layout.slot(block_name(k, "mod.w"))) * cond;
    mod.colwise() += view(params, layout.slot(block_name(k, "mod.b"))).col(0);
    layer_norm(x, fc.normalized[k], fc.inv_std[k]);
    MatrixXd modulated =
        fc.normalized[k].cwiseProduct((mod.bottomRows(H).array() + 1.0).matrix()) + mod.topRows(H);
    MatrixXd pre = view(params, layout.slot(block_name(k, "fc1.w"))) * modulated;
    pre.colwise() += view(params, layout.slot(block_name(k, "fc1.b"))).col(0);
    MatrixXd act = silu(pre);
    x.noalias() += view(params, layout.slot(block_name(k, "fc2.w"))) * act;
    x.colwise() += view(params, layout.slot(block_name(k, "fc2.b"))).col(0);
    fc.modulation[k] = std::move(mod);
    fc.modulated[k] = std::move(modulated);
    fc.fc1_pre[k] = std::move(pre);
    fc.fc1_act[k] = std::move(act);
  }

  MatrixXd final_mod = view(params, layout.slot("final.mod.w")) * cond;
  final_mod.colwise() += view(params, layout.slot("final.mod.b")).col(0);
  MatrixXd final_normalized, final_inv_std;
  layer_norm(x, final_normalized, final_inv_std);
  MatrixXd final_modulated =
      final_normalized.cwiseProduct((final_mod.bottomRows(H).array() + 1.0).matrix()) +
      final_mod.topRows(H);
  MatrixXd logits = view(params, layout.slot("head.w")) * final_modulated;
  logits.colwise() += view(params, layout.slot("head.b")).col(0);
  if (spec.masked_target) {
    for (int i = 0; i < spec.length; ++i) {
      logits.row(static_cast<Eigen::Index>(i) * spec.vocab_size + *spec.masked_target)
          .setConstant(kImpossibleLogit);
    }
  }

  if (cache) {
    fc.tokens = z;
    fc.embedded = std::move(embedded);
    fc.time_features = std::move(time_features);
    fc.step_features = std::move(step_features);
    fc.time_pre = std::move(time_pre);
    fc.step_pre = std::move(step_pre);
    fc.fused_in = std::move(fused_in);
    fc.cond_pre = std::move(cond_pre);
    fc.cond = std::move(cond);
    fc.final_in = std::move(x);
    fc.final_modulation = std::move(final_mod);
    fc.final_normalized = std::move(final_normalized);
    fc.final_inv_std = std::move(final_inv_std);
    fc.final_modulated = std::move(final_modulated);
  }
  return logits;
}

VectorXd neural_backward(const NeuralDenoiserSpec& spec, const ParameterLayout& layout,
                         const VectorXd& params, const ForwardCache& fc, const MatrixXd& dlogits_in) {
  const Eigen::Index H = spec.hidden_dim;
  const Eigen::Index C = spec.cond_dim;
  const Eigen::Index E = spec.embed_dim;
  VectorXd grad = VectorXd::Zero(layout.total_size());
  auto g = [&](const std::string& name) { return view(grad, layout.slot(name)); };
  auto w = [&](const std::string& name) { return view(params, layout.slot(name)); };

  MatrixXd dlogits = dlogits_in;
  if (spec.masked_target) {
    for (int i = 0; i < spec.length; ++i) {
      dlogits.row(static_cast<Eigen::Index>(i) * spec.vocab_size + *spec.masked_target).setZero();
    }
  }

  // Head and final modulation.
  g("head.w").noalias() = dlogits * fc.final_modulated.transpose();
  g("head.b") = dlogits.rowwise().sum();
  MatrixXd dmod_out = w("head.w").transpose() * dlogits;
  MatrixXd dmod(2 * H, dlogits.cols());
  dmod.topRows(H) = dmod_out;
  dmod.bottomRows(H) = dmod_out.cwiseProduct(fc.final_normalized);
  MatrixXd dnorm = dmod_out.cwiseProduct((fc.final_modulation.bottomRows(H).array() + 1.0).matrix());
  g("final.mod.w").noalias() = dmod * fc.cond.transpose();
  g("final.mod.b") = dmod.rowwise().sum();
  MatrixXd dcond = w("final.mod.w").transpose() * dmod;
  MatrixXd dx = layer_norm_backward(dnorm, fc.final_normalized, fc.final_inv_std);

  for (int k = spec.depth - 1; k >= 0; --k) {
    // x_out = x_in + fc2(silu(fc1(modulated)))
    g(block_name(k, "fc2.w")).noalias() = dx * fc.fc1_act[k].transpose();
    g(block_name(k, "fc2.b")) = dx.rowwise().sum();
    MatrixXd dact = w(block_name(k, "fc2.w")).transpose() * dx;
    MatrixXd dpre = dact.cwiseProduct(silu_grad(fc.fc1_pre[k]));
    g(block_name(k, "fc1.w")).noalias() = dpre * fc.modulated[k].transpose();
    g(block_name(k, "fc1.b")) = dpre.rowwise().sum();
    MatrixXd dm = w(block_name(k, "fc1.w")).transpose() * dpre;
    MatrixXd dblock_mod(2 * H, dx.cols());
    dblock_mod.topRows(H) = dm;
    dblock_mod.bottomRows(H) = dm.cwiseProduct(fc.normalized[k]);
    MatrixXd dn = dm.cwiseProduct((fc.modulation[k].bottomRows(H).array() + 1.0).matrix());
    g(block_name(k, "mod.w")).noalias() = dblock_mod * fc.cond.transpose();
    g(block_name(k, "mod.b")) = dblock_mod.rowwise().sum();
    dcond.noalias() += w(block_name(k, "mod.w")).transpose() * dblock_mod;
    dx += layer_norm_backward(dn, fc.normalized[k], fc.inv_std[k]);
  }

  // Input projection and embeddings.
  g("in.w").noalias() = dx * fc.embedded.transpose();
  g("in.b") = dx.rowwise().sum();
  const MatrixXd dembedded = w("in.w").transpose() * dx;
  auto dembed = g("embed");
  for (Eigen::Index b = 0; b < dembedded.cols(); ++b) {
    const auto& seq = fc.tokens[static_cast<std::size_t>(b)];
    for (int i = 0; i < spec.length; ++i) {
      dembed.row(seq[i]) += dembedded.block(i * E, b, E, 1).transpose();
    }
  }

  // Conditioning path.
  const MatrixXd dcond_pre = dcond.cwiseProduct(silu_grad(fc.cond_pre));
  g("fuse.w").noalias() = dcond_pre * fc.fused_in.transpose();
  g("fuse.b") = dcond_pre.rowwise().sum();
  const MatrixXd dfused = w("fuse.w").transpose() * dcond_pre;
  const MatrixXd dtime_pre = dfused.topRows(C).cwiseProduct(silu_grad(fc.time_pre));
  const MatrixXd dstep_pre = dfused.bottomRows(C).cwiseProduct(silu_grad(fc.step_pre));
  g("time.w").noalias() = dtime_pre * fc.time_features.transpose();
  g("time.b") = dtime_pre.rowwise().sum();
  g("step.w").noalias() = dstep_pre * fc.step_features.transpose();
  g("step.b") = dstep_pre.rowwise().sum();
  return grad;
}

RowMatrix logits_column(const MatrixXd& batch_logits, Eigen::Index column, int length,
                        int vocab_size) {
  RowMatrix out(length, vocab_size);
  for (int i = 0; i < length; ++i) {
    out.row(i) = batch_logits.block(static_cast<Eigen::Index>(i) * vocab_size, column, vocab_size, 1)
                     .transpose();
  }
  return out;
}

RowMatrix neural_forward(const NeuralDenoiserSpec& spec, const VectorXd& params, const Sequence& z,
                         double t, double h) {
  const ParameterLayout layout(spec);
  const MatrixXd logits = neural_forward_batch(spec, layout, params, {z}, {t}, {h});
  return logits_column(logits, 0, spec.length, spec.vocab_size);
}

NeuralDenoiser::NeuralDenoiser(NeuralDenoiserSpec spec, std::uint64_t seed)
    : spec_(spec), layout_(spec), params_(init_parameters(spec, seed)) {}

NeuralDenoiser::NeuralDenoiser(NeuralDenoiserSpec spec, VectorXd params)
    : spec_(spec), layout_(spec), params_(std::move(params)) {
  if (params_.size() != layout_.total_size()) {
    throw ConfigError("parameter vector does not match the denoiser layout");
  }
}

void NeuralDenoiser::set_parameters(const VectorXd& params) {
  if (params.size() != layout_.total_size()) {
    throw ConfigError("parameter vector does not match the denoiser layout");
  }
  params_ = params;
}

MatrixXd NeuralDenoiser::forward(const std::vector<Sequence>& z, const std::vector<double>& t,
                                 const std::vector<double>& h, ForwardCache* cache) const {
  return neural_forward_batch(spec_, layout_, params_, z, t, h, cache);
}

VectorXd NeuralDenoiser::backward(const ForwardCache& cache, const MatrixXd& dlogits) const {
  return neural_backward(spec_, layout_, params_, cache, dlogits);
}

RowMatrix NeuralDenoiser::compute_logits(const Sequence& z, double t, double h) const {
  const MatrixXd logits = neural_forward_batch(spec_, layout_, params_, {z}, {t}, {h});
  return logits_column(logits, 0, spec_.length, spec_.vocab_size);
}

std::vector<RowMatrix> NeuralDenoiser::compute_logits_batch(const std::vector<Sequence>& z,
                                                            const std::vector<double>& t,
                                                            const std::vector<double>& h) const {
  const MatrixXd logits = neural_forward_batch(spec_, layout_, params_, z, t, h);
  std::vector<RowMatrix> out;
  out.reserve(z.size());
  for (Eigen::Index b = 0; b < logits.cols(); ++b) {
    out.push_back(logits_column(logits, b, spec_.length, spec_.vocab_size));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

nlohmann::json spec_to_json(const NeuralDenoiserSpec& spec) {
  nlohmann::json j;
  j["vocab_size"] = spec.vocab_size;
  j["length"] = spec.length;
  j["embed_dim"] = spec.embed_dim;
  j["hidden_dim"] = spec.hidden_dim;
  j["depth"] = spec.depth;
  j["cond_dim"] = spec.cond_dim;
  j["freq_dim"] = spec.freq_dim;
  j["masked_target"] = spec.masked_target ? nlohmann::json(*spec.masked_target) : nlohmann::json();
  return j;
}

NeuralDenoiserSpec spec_from_json(const nlohmann::json& j) {
  NeuralDenoiserSpec spec;
  spec.vocab_size = j.at("vocab_size").get<int>();
  spec.length = j.at("length").get<int>();
  spec.embed_dim = j.at("embed_dim").get<int>();
  spec.hidden_dim = j.at("hidden_dim").get<int>();
  spec.depth = j.at("depth").get<int>();
  spec.cond_dim = j.at("cond_dim").get<int>();
  spec.freq_dim = j.at("freq_dim").get<int>();
  if (!j.at("masked_target").is_null()) spec.masked_target = j.at("masked_target").get<Token>();
  validate(spec);
  return spec;
}

std::uint64_t to_little_endian(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
    return r;
  }
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const NeuralDenoiserSpec& spec,
                     const VectorXd& params) {
  const ParameterLayout layout(spec);
  if (params.size() != layout.total_size()) {
    throw ConfigError("checkpoint parameters do not match the spec");
  }
  nlohmann::json header;
  header["format"] = "float64-le";
  header["spec"] = spec_to_json(spec);
  header["count"] = params.size();
  header["tensors"] = nlohmann::json::array();
  for (const auto& s : layout.slots()) {
    header["tensors"].push_back({{"name", s.name}, {"shape", {s.rows, s.cols}}});
  }

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out << kCheckpointMagic << '\n' << header.dump() << '\n';
    for (Eigen::Index i = 0; i < params.size(); ++i) {
      const std::uint64_t bits = to_little_endian(std::bit_cast<std::uint64_t>(params[i]));
      out.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
    }
    if (!out) throw IoError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string magic, header_line;
  std::getline(in, magic);
  if (magic != kCheckpointMagic) throw ValidationError(path.string() + " is not a stepflow checkpoint");
  std::getline(in, header_line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_line);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed checkpoint header: " + std::string(e.what()));
  }
  Checkpoint ck;
  try {
    ck.spec = spec_from_json(header.at("spec"));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed checkpoint spec: " + std::string(e.what()));
  }
  const ParameterLayout layout(ck.spec);
  const auto count = header.at("count").get<Eigen::Index>();
  if (count != layout.total_size()) throw ValidationError("checkpoint parameter count mismatch");
  ck.params.resize(count);
  for (Eigen::Index i = 0; i < count; ++i) {
    std::uint64_t bits = 0;
    in.read(reinterpret_cast<char*>(&bits), sizeof(bits));
    if (!in) throw ValidationError("checkpoint truncated");
    ck.params[i] = std::bit_cast<double>(to_little_endian(bits));
  }
  return ck;
}

}  // namespace stepflow
