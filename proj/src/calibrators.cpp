#include "calscale/calibrators.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

namespace calscale {

const char* kind_name(CalibratorKind kind) {
  switch (kind) {
    case CalibratorKind::TS: return "ts";
    case CalibratorKind::ETS: return "ets";
    case CalibratorKind::PTS: return "pts";
    case CalibratorKind::CTS: return "cts";
  }
  return "?";
}

CalibratorKind kind_from_name(const std::string& name) {
  if (name == "ts") return CalibratorKind::TS;
  if (name == "ets") return CalibratorKind::ETS;
  if (name == "pts") return CalibratorKind::PTS;
  if (name == "cts") return CalibratorKind::CTS;
  throw ConfigError("unknown calibrator kind '" + name + "'");
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void stable_softmax(std::span<const double> z, std::span<double> p) {
  double m = z[0];
  for (double v : z) m = std::max(m, v);
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] - m);
    sum += p[i];
  }
  for (std::size_t i = 0; i < z.size(); ++i) p[i] /= sum;
}

}  // namespace

std::vector<std::size_t> Calibrator::mlp_dims() const {
  std::vector<std::size_t> dims;
  dims.push_back(arch_.top_s);
  for (std::size_t i = 0; i < arch_.hidden_layers; ++i) dims.push_back(arch_.hidden_width);
  dims.push_back(1);
  return dims;
}

Calibrator Calibrator::make(CalibratorKind kind, std::size_t classes, const PtsArch& arch,
                            std::uint64_t seed) {
  if (classes < 2) throw ConfigError("calibrator needs at least 2 classes");
  Calibrator cal;
  cal.kind_ = kind;
  cal.classes_ = classes;
  const double theta_one = softplus_inv(1.0);
  switch (kind) {
    case CalibratorKind::TS:
      cal.params_ = {theta_one};
      break;
    case CalibratorKind::ETS:
      cal.params_ = {theta_one, 1.0, 0.0, 0.0};
      break;
    case CalibratorKind::CTS:
      cal.params_.assign(classes, theta_one);
      break;
    case CalibratorKind::PTS: {
      cal.arch_ = arch;
      cal.arch_.top_s = std::min<std::size_t>(arch.top_s, classes);
      if (cal.arch_.top_s < 1 || cal.arch_.hidden_layers < 1 || cal.arch_.hidden_width < 1)
        throw ConfigError("PTS architecture fields must be >= 1");
      const auto dims = cal.mlp_dims();
      std::mt19937_64 rng(seed);
      for (std::size_t t = 0; t + 1 < dims.size(); ++t) {
        const std::size_t fan_in = dims[t], fan_out = dims[t + 1];
        const bool last = t + 2 == dims.size();
        const double r = last ? 0.1 : std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        std::uniform_real_distribution<double> u(-r, r);
        for (std::size_t i = 0; i < fan_in * fan_out; ++i) cal.params_.push_back(u(rng));
        for (std::size_t i = 0; i < fan_out; ++i)
          cal.params_.push_back(last ? theta_one : 0.0);  // start near temperature 1
      }
      break;
    }
  }
  return cal;
}

void Calibrator::set_params(std::span<const double> p) {
  if (p.size() != params_.size())
    throw ConfigError("calibrator parameter count mismatch: expected " +
                      std::to_string(params_.size()) + ", got " + std::to_string(p.size()));
  params_.assign(p.begin(), p.end());
}

double Calibrator::temperature() const {
  if (kind_ != CalibratorKind::TS && kind_ != CalibratorKind::ETS)
    throw ConfigError("temperature() is only defined for TS and ETS");
  return softplus(params_[0]);
}

std::vector<double> Calibrator::class_temperatures() const {
  if (kind_ != CalibratorKind::CTS)
    throw ConfigError("class_temperatures() is only defined for CTS");
  std::vector<double> t(classes_);
  for (std::size_t i = 0; i < classes_; ++i) t[i] = softplus(params_[i]);
  return t;
}

std::array<double, 3> Calibrator::ensemble_weights() const {
  if (kind_ != CalibratorKind::ETS)
    throw ConfigError("ensemble_weights() is only defined for ETS");
  return {params_[1], params_[2], params_[3]};
}

void Calibrator::set_temperature(double t) {
  const double theta = softplus_inv(t);
  switch (kind_) {
    case CalibratorKind::TS:
    case CalibratorKind::ETS:
      params_[0] = theta;
      return;
    case CalibratorKind::CTS:
      std::fill(params_.begin(), params_.end(), theta);
      return;
    case CalibratorKind::PTS:
      throw ConfigError("set_temperature() is not defined for PTS");
  }
}

void Calibrator::project_ets_weights(bool sum_to_one) {
  if (kind_ != CalibratorKind::ETS) return;
  for (int i = 1; i <= 3; ++i) params_[i] = std::max(params_[i], 0.0);
  if (sum_to_one) {
    const double s = params_[1] + params_[2] + params_[3];
    if (s > 0.0)
      for (int i = 1; i <= 3; ++i) params_[i] /= s;
    else
      for (int i = 1; i <= 3; ++i) params_[i] = 1.0 / 3.0;
  }
}

double Calibrator::pts_forward(std::span<const double> z, std::vector<double>* activations,
                               std::vector<double>* sorted) const {
  const std::size_t s = arch_.top_s;
  std::vector<double> local_sorted;
  std::vector<double>& zs = sorted ? *sorted : local_sorted;
  zs.assign(z.begin(), z.end());
  std::partial_sort(zs.begin(), zs.begin() + s, zs.end(), std::greater<>());
  zs.resize(s);

  const auto dims = mlp_dims();
  std::vector<double> cur = zs;
  if (activations) {
    activations->clear();
    activations->insert(activations->end(), cur.begin(), cur.end());
  }
  std::size_t off = 0;
  for (std::size_t t = 0; t + 1 < dims.size(); ++t) {
    const std::size_t in = dims[t], out = dims[t + 1];
    const bool last = t + 2 == dims.size();
    std::vector<double> next(out);
    for (std::size_t j = 0; j < out; ++j) {
      double pre = params_[off + in * out + j];  // bias
      const double* w = params_.data() + off + j * in;
      for (std::size_t i = 0; i < in; ++i) pre += w[i] * cur[i];
      next[j] = last ? pre : std::max(0.0, pre);
    }
    off += in * out + out;
    cur = std::move(next);
    if (activations) activations->insert(activations->end(), cur.begin(), cur.end());
  }
  return cur[0];  // pre-softplus output
}

double Calibrator::sample_temperature(std::span<const double> z) const {
  if (kind_ != CalibratorKind::PTS)
    throw ConfigError("sample_temperature() is only defined for PTS");
  return softplus(pts_forward(z, nullptr, nullptr));
}

void Calibrator::apply_row(std::span<const double> z, std::span<double> out) const {
  const std::size_t c = classes_;
  switch (kind_) {
    case CalibratorKind::TS: {
      const double t = softplus(params_[0]);
      for (std::size_t j = 0; j < c; ++j) out[j] = z[j] / t;
      return;
    }
    case CalibratorKind::ETS: {
      const double t = softplus(params_[0]);
      const double w1 = params_[1], w2 = params_[2], w3 = params_[3];
      const double bias = w3 / static_cast<double>(c);
      for (std::size_t j = 0; j < c; ++j) out[j] = w1 * z[j] / t + w2 * z[j] + bias;
      return;
    }
    case CalibratorKind::CTS:
      for (std::size_t j = 0; j < c; ++j) out[j] = z[j] / softplus(params_[j]);
      return;
    case CalibratorKind::PTS: {
      const double t = softplus(pts_forward(z, nullptr, nullptr));
      for (std::size_t j = 0; j < c; ++j) out[j] = z[j] / t;
      return;
    }
  }
}

Matrix Calibrator::apply(const Matrix& logits) const {
  if (logits.cols() != classes_)
    throw ConfigError("apply: logits have " + std::to_string(logits.cols()) +
                      " columns, calibrator expects " + std::to_string(classes_));
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    apply_row(logits.row(i), out.row(i));
    for (double v : out.row(i))
      if (!std::isfinite(v))
        throw NumericError("calibrated logit non-finite at row " + std::to_string(i));
  }
  return out;
}

void Calibrator::backprop_row(std::span<const double> z, std::span<const double> dout,
                              std::span<double> grad) const {
  const std::size_t c = classes_;
  switch (kind_) {
    case CalibratorKind::TS: {
      const double t = softplus(params_[0]);
      const double sig = logistic(params_[0]);
      double acc = 0.0;
      for (std::size_t j = 0; j < c; ++j) acc += dout[j] * (-z[j] / (t * t));
      grad[0] += acc * sig;
      return;
    }
    case CalibratorKind::ETS: {
      const double t = softplus(params_[0]);
      const double sig = logistic(params_[0]);
      const double w1 = params_[1];
      double d_theta = 0.0, d_w1 = 0.0, d_w2 = 0.0, d_w3 = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        d_theta += dout[j] * w1 * (-z[j] / (t * t));
        d_w1 += dout[j] * z[j] / t;
        d_w2 += dout[j] * z[j];
        d_w3 += dout[j] / static_cast<double>(c);
      }
      grad[0] += d_theta * sig;
      grad[1] += d_w1;
      grad[2] += d_w2;
      grad[3] += d_w3;
      return;
    }
    case CalibratorKind::CTS: {
      for (std::size_t j = 0; j < c; ++j) {
        const double t = softplus(params_[j]);
        grad[j] += dout[j] * (-z[j] / (t * t)) * logistic(params_[j]);
      }
      return;
    }
    case CalibratorKind::PTS: {
      std::vector<double> acts, zs;
      const double o = pts_forward(z, &acts, &zs);
      const double t = softplus(o);
      double dt = 0.0;
      for (std::size_t j = 0; j < c; ++j) dt += dout[j] * (-z[j] / (t * t));
      double d_o = dt * logistic(o);

      const auto dims = mlp_dims();
      // offsets of each layer's weights and of each layer's activations
      std::vector<std::size_t> poff(dims.size() - 1), aoff(dims.size());
      std::size_t p = 0, a = 0;
      for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        poff[l] = p;
        p += dims[l] * dims[l + 1] + dims[l + 1];
        aoff[l] = a;
        a += dims[l];
      }
      aoff[dims.size() - 1] = a;

      std::vector<double> delta{d_o};  // d loss / d pre-activation of current layer
      for (std::size_t l = dims.size() - 1; l-- > 0;) {
        const std::size_t in = dims[l], out = dims[l + 1];
        const double* a_in = acts.data() + aoff[l];
        std::vector<double> delta_prev(in, 0.0);
        for (std::size_t j = 0; j < out; ++j) {
          const double dj = delta[j];
          if (dj == 0.0) continue;
          double* gw = grad.data() + poff[l] + j * in;
          const double* w = params_.data() + poff[l] + j * in;
          for (std::size_t i = 0; i < in; ++i) {
            gw[i] += dj * a_in[i];
            delta_prev[i] += dj * w[i];
          }
          grad[poff[l] + in * out + j] += dj;  // bias
        }
        if (l == 0) break;
        // ReLU mask of the layer below (its activations are the inputs here)
        for (std::size_t i = 0; i < in; ++i)
          if (a_in[i] <= 0.0) delta_prev[i] = 0.0;
        delta = std::move(delta_prev);
      }
      return;
    }
  }
}

Matrix probabilities(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) stable_softmax(logits.row(i), p.row(i));
  return p;
}

LossEvaluation evaluate_loss(const Calibrator& cal, const LogitDataset& ds,
                             const losses::LossSpec& spec,
                             std::span<const double> class_weights, bool with_gradient) {
  spec.validate();
  if (ds.class_count != cal.classes())
    throw ConfigError("evaluate_loss: dataset class count does not match calibrator");
  if (!class_weights.empty() && class_weights.size() != ds.class_count)
    throw ConfigError("evaluate_loss: class weight vector has wrong length");

  const std::size_t n = ds.sample_count();
  const std::size_t c = ds.class_count;

  LossEvaluation ev;
  ev.class_losses.values.assign(c, 0.0);
  ev.class_losses.counts.assign(c, 0);
  if (with_gradient) ev.gradient.assign(cal.param_count(), 0.0);

  std::vector<double> scale(c, 1.0);
  if (spec.per_class_mean) {
    std::vector<std::uint32_t> counts(c, 0);
    for (auto l : ds.labels) ++counts[l];
    for (std::size_t i = 0; i < c; ++i)
      if (counts[i] > 0) scale[i] = 1.0 / counts[i];
  }

  std::vector<double> zrow(c), out(c), p(c), dldz(c);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) zrow[j] = ds.logit(i, j);
    cal.apply_row(zrow, out);
    stable_softmax(out, p);
    const std::uint32_t y = ds.labels[i];
    const double loss = losses::sample_loss(p, y, spec, &ev.class_losses.clamp_events);
    ev.class_losses.values[y] += loss;
    ++ev.class_losses.counts[y];
    const double mult =
        (class_weights.empty() ? 1.0 : 1.0 + class_weights[y]) * scale[y];
    ev.total += mult * loss;
    if (with_gradient) {
      losses::sample_loss_grad(p, y, spec, dldz);
      if (mult != 1.0)
        for (double& v : dldz) v *= mult;
      cal.backprop_row(zrow, dldz, ev.gradient);
    }
  }
  if (spec.per_class_mean)
    for (std::size_t i = 0; i < c; ++i) ev.class_losses.values[i] *= scale[i];
  return ev;
}

std::vector<double> loss_gradient(const Calibrator& cal, const LogitDataset& ds,
                                  const losses::LossSpec& spec,
                                  std::span<const double> class_weights) {
  return evaluate_loss(cal, ds, spec, class_weights, true).gradient;
}

void Calibrator::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os << "calscale-calibrator v1\n";
  os << "kind " << kind_name(kind_) << '\n';
  os << "classes " << classes_ << '\n';
  if (kind_ == CalibratorKind::PTS) {
    os << "top_s " << arch_.top_s << '\n';
    os << "hidden_layers " << arch_.hidden_layers << '\n';
    os << "hidden_width " << arch_.hidden_width << '\n';
  }
  os << "fitted " << (fitted_ ? 1 : 0) << '\n';
  os << "params " << params_.size() << '\n';
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (i) os << ' ';
    os << fmt(params_[i]);
  }
  os << '\n';
  os.flush();
  if (!os) throw IoError("write failed: " + path.string());
}

Calibrator Calibrator::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open calibrator file: " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != "calscale-calibrator v1")
    throw ConfigError("bad calibrator header in " + path.string());

  std::string kind_str;
  std::size_t classes = 0, param_count = 0;
  PtsArch arch;
  int fitted = 0;
  std::vector<double> params;

  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    if (key == "kind") ls >> kind_str;
    else if (key == "classes") ls >> classes;
    else if (key == "top_s") ls >> arch.top_s;
    else if (key == "hidden_layers") ls >> arch.hidden_layers;
    else if (key == "hidden_width") ls >> arch.hidden_width;
    else if (key == "fitted") ls >> fitted;
    else if (key == "params") {
      ls >> param_count;
      params.reserve(param_count);
      double v;
      while (params.size() < param_count && is >> v) params.push_back(v);
    } else {
      throw ConfigError("unknown calibrator key '" + key + "' in " + path.string());
    }
    if (ls.fail()) throw ConfigError("cannot parse calibrator line '" + line + "'");
  }
  if (params.size() != param_count)
    throw ConfigError("calibrator file lists " + std::to_string(param_count) +
                      " params but contains " + std::to_string(params.size()));

  Calibrator cal = make(kind_from_name(kind_str), classes, arch, /*seed=*/0);
  cal.set_params(params);
  cal.fitted_ = fitted != 0;
  return cal;
}

}  // namespace calscale
