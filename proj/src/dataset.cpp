#include "calscale/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace calscale {

namespace {

constexpr char kMagic[4] = {'S', 'C', 'T', 'L'};
constexpr unsigned char kVersion = 0x01;

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_f32(std::ostream& os, float v) { write_u32(os, std::bit_cast<std::uint32_t>(v)); }

float read_f32(std::istream& is) { return std::bit_cast<float>(read_u32(is)); }

std::string fmt_float(float v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
  return buf;
}

LogitDataset load_binary(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open dataset file: " + path.string());

  char magic[4];
  is.read(magic, 4);
  unsigned char version = 0;
  is.read(reinterpret_cast<char*>(&version), 1);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw ConfigError("malformed header: bad magic bytes in " + path.string());
  if (version != kVersion)
    throw ConfigError("malformed header: unsupported version " + std::to_string(version) +
                      " in " + path.string());

  const std::uint32_t n = read_u32(is);
  const std::uint32_t c = read_u32(is);
  if (!is) throw ConfigError("malformed header: truncated dimensions in " + path.string());
  if (n < 1 || c < 2)
    throw ConfigError("malformed header: need N >= 1 and C >= 2, got N=" + std::to_string(n) +
                      " C=" + std::to_string(c));

  LogitDataset ds;
  ds.class_count = c;
  ds.logits.resize(static_cast<std::size_t>(n) * c);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < ds.logits.size(); ++i) {
    ds.logits[i] = read_f32(is);
    if (!is)
      throw ConfigError("shape mismatch: logits truncated at row " + std::to_string(i / c) +
                        " column " + std::to_string(i % c));
    if (!std::isfinite(ds.logits[i]))
      throw ConfigError("non-finite logit at row " + std::to_string(i / c) + " column " +
                        std::to_string(i % c));
  }
  for (std::uint32_t i = 0; i < n; ++i) {
    ds.labels[i] = read_u32(is);
    if (!is) throw ConfigError("shape mismatch: labels truncated at row " + std::to_string(i));
    if (ds.labels[i] >= c)
      throw ConfigError("label out of range [0, " + std::to_string(c) + ") at row " +
                        std::to_string(i) + ": " + std::to_string(ds.labels[i]));
  }
  is.peek();
  if (!is.eof()) throw ConfigError("shape mismatch: trailing bytes in " + path.string());
  return ds;
}

LogitDataset load_text(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open dataset file: " + path.string());

  std::string line;
  if (!std::getline(is, line)) throw ConfigError("malformed header: empty file " + path.string());
  std::istringstream header(line);
  long long n = 0, c = 0;
  if (!(header >> n >> c) || n < 1 || c < 2)
    throw ConfigError("malformed header: expected 'N C' with N >= 1, C >= 2 in " + path.string());

  LogitDataset ds;
  ds.class_count = static_cast<std::uint32_t>(c);
  ds.logits.reserve(static_cast<std::size_t>(n) * c);
  ds.labels.reserve(n);

  for (long long row = 0; row < n; ++row) {
    if (!std::getline(is, line))
      throw ConfigError("shape mismatch: header declares N=" + std::to_string(n) +
                        " but file has " + std::to_string(row) + " rows");
    std::istringstream ls(line);
    for (long long col = 0; col < c; ++col) {
      double v = 0.0;
      if (!(ls >> v))
        throw ConfigError("parse error at row " + std::to_string(row) + " column " +
                          std::to_string(col) + ": expected a number");
      const float f = static_cast<float>(v);
      if (!std::isfinite(v) || !std::isfinite(f))
        throw ConfigError("non-finite logit at row " + std::to_string(row) + " column " +
                          std::to_string(col));
      ds.logits.push_back(f);
    }
    long long label = -1;
    if (!(ls >> label))
      throw ConfigError("parse error at row " + std::to_string(row) + ": missing label");
    if (label < 0 || label >= c)
      throw ConfigError("label out of range [0, " + std::to_string(c) + ") at row " +
                        std::to_string(row) + ": " + std::to_string(label));
    ds.labels.push_back(static_cast<std::uint32_t>(label));
    std::string extra;
    if (ls >> extra)
      throw ConfigError("shape mismatch: extra token '" + extra + "' at row " +
                        std::to_string(row));
  }
  while (std::getline(is, line)) {
    if (!line.empty() && line.find_first_not_of(" \t\r") != std::string::npos)
      throw ConfigError("shape mismatch: more rows than header's N=" + std::to_string(n));
  }
  return ds;
}

}  // namespace

void LogitDataset::validate() const {
  const std::size_t n = labels.size();
  if (n < 1) throw ConfigError("dataset invalid: no samples");
  if (class_count < 2) throw ConfigError("dataset invalid: need at least 2 classes");
  if (logits.size() != n * class_count)
    throw ConfigError("dataset invalid: logits size " + std::to_string(logits.size()) +
                      " does not match N*C = " + std::to_string(n * class_count));
  for (std::size_t i = 0; i < n; ++i)
    if (labels[i] >= class_count)
      throw ConfigError("label out of range [0, " + std::to_string(class_count) + ") at row " +
                        std::to_string(i));
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (!std::isfinite(logits[i]))
      throw ConfigError("non-finite logit at row " + std::to_string(i / class_count) +
                        " column " + std::to_string(i % class_count));
}

std::vector<std::uint32_t> LogitDataset::class_counts() const {
  std::vector<std::uint32_t> counts(class_count, 0);
  for (auto l : labels) ++counts[l];
  return counts;
}

void LTSpec::validate() const {
  if (base_count < 1) throw ConfigError("LT spec: base_count must be >= 1");
  if (!(rho > 0.0) || rho > 1.0) throw ConfigError("LT spec: rho must be in (0, 1]");
  if (class_count < 2) throw ConfigError("LT spec: class_count must be >= 2");
}

std::vector<std::uint32_t> lt_target_counts(const LTSpec& spec) {
  spec.validate();
  std::vector<std::uint32_t> t(spec.class_count);
  for (std::uint32_t i = 0; i < spec.class_count; ++i) {
    const double exact =
        spec.base_count * std::pow(spec.rho, static_cast<double>(i) / (spec.class_count - 1));
    double rounded = 0.0;
    switch (spec.rounding) {
      case Rounding::Floor: rounded = std::floor(exact); break;
      case Rounding::Round: rounded = std::floor(exact + 0.5); break;
      case Rounding::Ceil: rounded = std::ceil(exact); break;
    }
    if (rounded < 1.0)
      throw ConfigError("LT spec: class " + std::to_string(i) + " target count is " +
                        std::to_string(rounded) + "; every class needs at least 1 sample");
    t[i] = static_cast<std::uint32_t>(rounded);
  }
  return t;
}

void SyntheticSpec::validate() const {
  if (class_count < 2) throw ConfigError("synthetic spec: class_count must be >= 2");
  if (samples_per_class.empty())
    throw ConfigError("synthetic spec: samples_per_class must not be empty");
  if (samples_per_class.size() != 1 && samples_per_class.size() != class_count)
    throw ConfigError("synthetic spec: samples_per_class must have 1 or class_count entries");
  for (auto s : samples_per_class)
    if (s < 1) throw ConfigError("synthetic spec: samples_per_class entries must be >= 1");
  if (class_mean_margin.empty())
    throw ConfigError("synthetic spec: class_mean_margin must not be empty");
  if (class_mean_margin.size() != 1 && class_mean_margin.size() != class_count)
    throw ConfigError("synthetic spec: class_mean_margin must have 1 or class_count entries");
  for (auto m : class_mean_margin)
    if (!std::isfinite(m)) throw ConfigError("synthetic spec: margins must be finite");
  if (!(overconfidence_scale > 0.0))
    throw ConfigError("synthetic spec: overconfidence_scale must be > 0");
  if (noise_std < 0.0) throw ConfigError("synthetic spec: noise_std must be >= 0");
}

LogitDataset load_dataset(const std::filesystem::path& path, FileFormat format) {
  LogitDataset ds =
      format == FileFormat::Binary ? load_binary(path) : load_text(path);
  ds.validate();
  return ds;
}

void save_dataset(const LogitDataset& ds, const std::filesystem::path& path, FileFormat format) {
  ds.validate();
  const auto n = static_cast<std::uint32_t>(ds.sample_count());
  if (format == FileFormat::Binary) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os.write(kMagic, 4);
    os.write(reinterpret_cast<const char*>(&kVersion), 1);
    write_u32(os, n);
    write_u32(os, ds.class_count);
    for (float v : ds.logits) write_f32(os, v);
    for (std::uint32_t l : ds.labels) write_u32(os, l);
    os.flush();
    if (!os) throw IoError("write failed: " + path.string());
  } else {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os << n << ' ' << ds.class_count << '\n';
    for (std::uint32_t i = 0; i < n; ++i) {
      for (std::uint32_t j = 0; j < ds.class_count; ++j) {
        if (j) os << ' ';
        os << fmt_float(ds.logit(i, j));
      }
      os << ' ' << ds.labels[i] << '\n';
    }
    os.flush();
    if (!os) throw IoError("write failed: " + path.string());
  }
}

LogitDataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const std::uint32_t c = spec.class_count;
  auto per_class = [&](std::uint32_t i) {
    return spec.samples_per_class.size() == 1 ? spec.samples_per_class[0]
                                              : spec.samples_per_class[i];
  };
  auto margin = [&](std::uint32_t i) {
    return spec.class_mean_margin.size() == 1 ? spec.class_mean_margin[0]
                                              : spec.class_mean_margin[i];
  };

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, 1.0);

  LogitDataset ds;
  ds.class_count = c;
  for (std::uint32_t cls = 0; cls < c; ++cls) {
    for (std::uint32_t k = 0; k < per_class(cls); ++k) {
      for (std::uint32_t j = 0; j < c; ++j) {
        double v = (j == cls ? margin(cls) : 0.0);
        if (spec.noise_std > 0.0) v += spec.noise_std * noise(rng);
        ds.logits.push_back(static_cast<float>(spec.overconfidence_scale * v));
      }
      ds.labels.push_back(cls);
    }
  }
  ds.validate();
  return ds;
}

namespace {

LogitDataset gather(const LogitDataset& ds, const std::vector<std::size_t>& rows) {
  LogitDataset out;
  out.class_count = ds.class_count;
  out.logits.reserve(rows.size() * ds.class_count);
  out.labels.reserve(rows.size());
  for (std::size_t r : rows) {
    const float* src = ds.logits.data() + r * ds.class_count;
    out.logits.insert(out.logits.end(), src, src + ds.class_count);
    out.labels.push_back(ds.labels[r]);
  }
  return out;
}

std::vector<std::vector<std::size_t>> rows_by_class(const LogitDataset& ds) {
  std::vector<std::vector<std::size_t>> idx(ds.class_count);
  for (std::size_t i = 0; i < ds.sample_count(); ++i) idx[ds.labels[i]].push_back(i);
  return idx;
}

}  // namespace

LogitDataset make_lt_split(const LogitDataset& ds, const LTSpec& spec) {
  ds.validate();
  if (spec.class_count != ds.class_count)
    throw ConfigError("LT spec class_count " + std::to_string(spec.class_count) +
                      " does not match dataset class_count " + std::to_string(ds.class_count));
  const auto targets = lt_target_counts(spec);
  auto idx = rows_by_class(ds);
  for (std::uint32_t i = 0; i < ds.class_count; ++i)
    if (idx[i].size() < targets[i])
      throw ConfigError("class " + std::to_string(i) + " has " + std::to_string(idx[i].size()) +
                        " samples but the LT split needs " + std::to_string(targets[i]) +
                        " (deficit " + std::to_string(targets[i] - idx[i].size()) + ")");

  std::mt19937_64 rng(spec.seed);
  std::vector<std::size_t> chosen;
  for (std::uint32_t i = 0; i < ds.class_count; ++i) {
    std::shuffle(idx[i].begin(), idx[i].end(), rng);
    chosen.insert(chosen.end(), idx[i].begin(), idx[i].begin() + targets[i]);
  }
  std::sort(chosen.begin(), chosen.end());
  return gather(ds, chosen);
}

SplitResult split(const LogitDataset& ds, double fraction, std::uint64_t seed) {
  ds.validate();
  if (!(fraction > 0.0) || !(fraction < 1.0))
    throw ConfigError("split fraction must be in (0, 1)");
  if (ds.sample_count() < 2) throw ConfigError("cannot split a single-sample dataset");

  std::mt19937_64 rng(seed);
  auto idx = rows_by_class(ds);
  const bool can_stratify =
      std::none_of(idx.begin(), idx.end(), [](const auto& v) { return v.size() == 1; });

  std::vector<std::size_t> first_rows, second_rows;
  if (can_stratify) {
    for (auto& cls : idx) {
      if (cls.empty()) continue;
      std::shuffle(cls.begin(), cls.end(), rng);
      const auto k = static_cast<std::size_t>(std::floor(cls.size() * fraction + 0.5));
      first_rows.insert(first_rows.end(), cls.begin(), cls.begin() + k);
      second_rows.insert(second_rows.end(), cls.begin() + k, cls.end());
    }
  } else {
    std::vector<std::size_t> all(ds.sample_count());
    std::iota(all.begin(), all.end(), 0);
    std::shuffle(all.begin(), all.end(), rng);
    auto k = static_cast<std::size_t>(std::floor(all.size() * fraction + 0.5));
    k = std::min(std::max<std::size_t>(k, 1), all.size() - 1);
    first_rows.assign(all.begin(), all.begin() + k);
    second_rows.assign(all.begin() + k, all.end());
  }
  if (first_rows.empty() || second_rows.empty())
    throw ConfigError("split fraction leaves one side empty");

  std::sort(first_rows.begin(), first_rows.end());
  std::sort(second_rows.begin(), second_rows.end());
  return {gather(ds, first_rows), gather(ds, second_rows), can_stratify};
}

Matrix to_matrix(const LogitDataset& ds) {
  Matrix m(ds.sample_count(), ds.class_count);
  for (std::size_t i = 0; i < ds.logits.size(); ++i) m.data()[i] = ds.logits[i];
  return m;
}

}  // namespace calscale
