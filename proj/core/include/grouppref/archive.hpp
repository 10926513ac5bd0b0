#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "grouppref/common.hpp"

namespace grouppref {

/// One entry of a model archive: a named tensor stored row-major.
struct NamedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> values;
};

/// Named-tensor archive shared by every trained component. Serialized as a
/// single JSON document; doubles are written in shortest round-trip form so
/// save/load is bit-exact.
struct ModelArchive {
  static constexpr int kFormatVersion = 1;

  int format_version = kFormatVersion;
  std::string stage;
  std::string config_hash;
  nlohmann::json config = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor& find(std::string_view name) const;
};

nlohmann::json archive_to_json(const ModelArchive& archive);
ModelArchive archive_from_json(const nlohmann::json& j);

void save_archive(const ModelArchive& archive, const std::filesystem::path& path);
ModelArchive load_archive(const std::filesystem::path& path);

/// Writes to `path.tmp` and renames over `path`, so readers never observe a
/// partially written file under the final name.
void write_text_atomic(const std::filesystem::path& path, std::string_view text);
std::string read_text(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Generic operations over parameter structs. A parameter struct exposes
//   template <class F> void visit(F&& f);        // f(name, tensor&)
//   template <class F> void visit(F&& f) const;  // f(name, const tensor&)
// where every tensor is an Eigen Mat or Vec. Gradients reuse the same struct.

template <class P>
std::vector<std::span<double>> tensor_spans(P& p) {
  std::vector<std::span<double>> out;
  p.visit([&](const std::string&, auto& t) {
    out.emplace_back(t.data(), static_cast<std::size_t>(t.size()));
  });
  return out;
}

template <class P>
std::vector<std::span<const double>> tensor_spans(const P& p) {
  std::vector<std::span<const double>> out;
  p.visit([&](const std::string&, const auto& t) {
    out.emplace_back(t.data(), static_cast<std::size_t>(t.size()));
  });
  return out;
}

template <class P>
std::size_t param_count(const P& p) {
  std::size_t n = 0;
  for (auto s : tensor_spans(p)) n += s.size();
  return n;
}

template <class P>
Vec flatten(const P& p) {
  Vec out(static_cast<Eigen::Index>(param_count(p)));
  Eigen::Index k = 0;
  for (auto s : tensor_spans(p))
    for (double v : s) out[k++] = v;
  return out;
}

template <class P>
void unflatten(P& p, const Vec& flat) {
  if (static_cast<std::size_t>(flat.size()) != param_count(p))
    throw ConfigError("unflatten: size mismatch");
  Eigen::Index k = 0;
  for (auto s : tensor_spans(p))
    for (double& v : s) v = flat[k++];
}

/// y += a * x
template <class P>
void axpy(P& y, double a, const P& x) {
  auto ys = tensor_spans(y);
  auto xs = tensor_spans(x);
  if (ys.size() != xs.size()) throw ConfigError("axpy: parameter layout mismatch");
  for (std::size_t i = 0; i < ys.size(); ++i) {
    if (ys[i].size() != xs[i].size()) throw ConfigError("axpy: tensor shape mismatch");
    for (std::size_t j = 0; j < ys[i].size(); ++j) ys[i][j] += a * xs[i][j];
  }
}

template <class P>
P zeros_like(const P& p) {
  P z = p;
  for (auto s : tensor_spans(z))
    for (double& v : s) v = 0.0;
  return z;
}

template <class P>
bool all_finite(const P& p) {
  for (auto s : tensor_spans(p))
    for (double v : s)
      if (!std::isfinite(v)) return false;
  return true;
}

template <class P>
bool params_equal(const P& a, const P& b) {
  auto as = tensor_spans(a);
  auto bs = tensor_spans(b);
  if (as.size() != bs.size()) return false;
  for (std::size_t i = 0; i < as.size(); ++i) {
    if (as[i].size() != bs[i].size()) return false;
    for (std::size_t j = 0; j < as[i].size(); ++j)
      if (as[i][j] != bs[i][j]) return false;
  }
  return true;
}

namespace detail {

template <class T>
NamedTensor to_named(const std::string& name, const T& t) {
  NamedTensor nt;
  nt.name = name;
  if constexpr (T::ColsAtCompileTime == 1) {
    nt.shape = {static_cast<std::size_t>(t.size())};
    nt.values.assign(t.data(), t.data() + t.size());
  } else {
    nt.shape = {static_cast<std::size_t>(t.rows()), static_cast<std::size_t>(t.cols())};
    nt.values.reserve(static_cast<std::size_t>(t.size()));
    for (Eigen::Index r = 0; r < t.rows(); ++r)
      for (Eigen::Index c = 0; c < t.cols(); ++c) nt.values.push_back(t(r, c));
  }
  return nt;
}

template <class T>
void from_named(const NamedTensor& nt, T& t) {
  if constexpr (T::ColsAtCompileTime == 1) {
    if (nt.shape.size() != 1) throw ConfigError("tensor '" + nt.name + "' is not a vector");
    t.resize(static_cast<Eigen::Index>(nt.shape[0]));
    for (Eigen::Index i = 0; i < t.size(); ++i) t[i] = nt.values[static_cast<std::size_t>(i)];
  } else {
    if (nt.shape.size() != 2) throw ConfigError("tensor '" + nt.name + "' is not a matrix");
    t.resize(static_cast<Eigen::Index>(nt.shape[0]), static_cast<Eigen::Index>(nt.shape[1]));
    std::size_t k = 0;
    for (Eigen::Index r = 0; r < t.rows(); ++r)
      for (Eigen::Index c = 0; c < t.cols(); ++c) t(r, c) = nt.values[k++];
  }
}

}  // namespace detail

template <class P>
void pack_params(const P& p, ModelArchive& archive) {
  p.visit([&](const std::string& name, const auto& t) {
    archive.tensors.push_back(detail::to_named(name, t));
  });
}

/// Fills `p` from the archive by tensor name; `p` must already have the
/// right layout (number of tensors), shapes are taken from the archive.
template <class P>
void unpack_params(P& p, const ModelArchive& archive) {
  p.visit([&](const std::string& name, auto& t) { detail::from_named(archive.find(name), t); });
}

}  // namespace grouppref
