#ifndef RFPROBE_SPACE_IO_HPP
#define RFPROBE_SPACE_IO_HPP

// JSON specs for flow spaces: model kinds with "params", tabulated custom files, and the
// inline key=value syntax used on the command line.

#include <Eigen/Dense>

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "rfprobe/error.hpp"
#include "rfprobe/flowspace.hpp"
#include "rfprobe/models.hpp"
#include "rfprobe/paths.hpp"

namespace rfprobe {

namespace detail {

using nlohmann::json;

inline const json& require(const json& obj, const std::string& key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key))
    throw Error(ErrorKind::schema, where + ": missing \"" + key + "\"");
  return obj.at(key);
}

inline double as_number(const json& v, const std::string& where) {
  if (!v.is_number()) throw Error(ErrorKind::schema, where + ": expected a number");
  return v.get<double>();
}

inline bool is_numeric_array(const json& v) {
  if (!v.is_array()) return false;
  for (const auto& e : v)
    if (!e.is_number()) return false;
  return true;
}

inline Eigen::MatrixXd parse_matrix(const json& v, int n, const std::string& where) {
  if (v.is_number()) return v.get<double>() * Eigen::MatrixXd::Identity(n, n);
  if (!v.is_array() || static_cast<int>(v.size()) != n)
    throw Error(ErrorKind::schema, where + ": expected a number or an n x n array");
  Eigen::MatrixXd m(n, n);
  for (int i = 0; i < n; ++i) {
    if (!v[i].is_array() || static_cast<int>(v[i].size()) != n)
      throw Error(ErrorKind::schema, where + ": ragged matrix");
    for (int j = 0; j < n; ++j) m(i, j) = as_number(v[i][j], where);
  }
  return m;
}

inline Eigen::VectorXd parse_vector(const json& v, int n, const std::string& where) {
  if (v.is_number()) return Eigen::VectorXd::Constant(n, v.get<double>());
  if (!is_numeric_array(v) || static_cast<int>(v.size()) != n)
    throw Error(ErrorKind::schema, where + ": expected a number or a length-n array");
  Eigen::VectorXd out(n);
  for (int i = 0; i < n; ++i) out(i) = v[i].get<double>();
  return out;
}

inline ScalarPath parse_scalar_path(const json& v, const std::string& where) {
  if (v.is_number()) return constant_path(v.get<double>());
  if (v.is_string()) {
    const std::string s = v.get<std::string>();
    if (s == "shrink") return ScalarPath({1.0, -2.0});
    if (s == "static") return constant_path(1.0);
    return parse_polynomial(s);
  }
  if (v.is_object() && v.contains("poly")) return parse_scalar_path(v.at("poly"), where);
  if (is_numeric_array(v) && !v.empty()) return ScalarPath(v.get<std::vector<double>>());
  throw Error(ErrorKind::schema, where + ": expected a number, polynomial string or coefficient list");
}

// Matrix path: number, n x n array, {"poly":[...]}, or (n = 1) a coefficient list / string.
inline MatrixPath parse_matrix_path(const json& v, int n, const std::string& where) {
  if (v.is_object() && v.contains("poly")) {
    const json& p = v.at("poly");
    if (!p.is_array() || p.empty()) throw Error(ErrorKind::schema, where + ": poly must be a list");
    std::vector<Eigen::MatrixXd> coeffs;
    for (const auto& c : p) coeffs.push_back(parse_matrix(c, n, where));
    return MatrixPath(std::move(coeffs));
  }
  if (n == 1 && (v.is_string() || is_numeric_array(v))) {
    const ScalarPath path = parse_scalar_path(v, where);
    std::vector<Eigen::MatrixXd> coeffs;
    for (double c : path.coeffs()) coeffs.push_back(scalar_matrix(c));
    return MatrixPath(std::move(coeffs));
  }
  return MatrixPath({parse_matrix(v, n, where)});
}

inline VectorPath parse_vector_path(const json& v, int n, const std::string& where) {
  if (v.is_object() && v.contains("poly")) {
    const json& p = v.at("poly");
    if (!p.is_array() || p.empty()) throw Error(ErrorKind::schema, where + ": poly must be a list");
    std::vector<Eigen::VectorXd> coeffs;
    for (const auto& c : p) coeffs.push_back(parse_vector(c, n, where));
    return VectorPath(std::move(coeffs));
  }
  if (n == 1 && (v.is_string() || is_numeric_array(v))) {
    const ScalarPath path = parse_scalar_path(v, where);
    std::vector<Eigen::VectorXd> coeffs;
    for (double c : path.coeffs())
      coeffs.push_back(Eigen::VectorXd::Constant(1, c));
    return VectorPath(std::move(coeffs));
  }
  return VectorPath({parse_vector(v, n, where)});
}

inline TimeWindow parse_window(const json& params, TimeWindow fallback, const std::string& where) {
  if (!params.contains("window")) return fallback;
  const json& w = params.at("window");
  if (!is_numeric_array(w) || w.size() != 2)
    throw Error(ErrorKind::schema, where + "/window: expected [lo, hi]");
  return TimeWindow{w[0].get<double>(), w[1].get<double>()};
}

inline int as_int(const json& v, const std::string& where) {
  const double d = as_number(v, where);
  if (d != static_cast<double>(static_cast<long long>(d)))
    throw Error(ErrorKind::schema, where + ": expected an integer");
  return static_cast<int>(d);
}

inline Eigen::MatrixXd parse_dist_matrix(const json& v, std::size_t n, const std::string& where) {
  Eigen::MatrixXd m(n, n);
  if (is_numeric_array(v)) {
    if (v.size() != n * n) throw Error(ErrorKind::schema, where + ": expected N*N entries");
    for (std::size_t k = 0; k < n * n; ++k) m(k / n, k % n) = v[k].get<double>();
    return m;
  }
  if (!v.is_array() || v.size() != n) throw Error(ErrorKind::schema, where + ": expected N rows");
  for (std::size_t i = 0; i < n; ++i) {
    if (!is_numeric_array(v[i]) || v[i].size() != n)
      throw Error(ErrorKind::schema, where + "/" + std::to_string(i) + ": expected N entries");
    for (std::size_t j = 0; j < n; ++j) m(i, j) = v[i][j].get<double>();
  }
  return m;
}

}  // namespace detail

inline FlowSpace space_from_json(const nlohmann::json& j);

namespace detail {

inline FlowSpace custom_from_json(const json& j) {
  const json& points = require(j, "points", "");
  const json& times = require(j, "times", "");
  const json& dist = require(j, "dist", "");
  const json& mass = require(j, "mass", "");
  const json& lip = require(j, "log_lipschitz", "");
  if (!points.is_array() || points.empty()) throw Error(ErrorKind::schema, "/points: expected a non-empty list");
  const std::size_t n = points.size();
  const std::size_t dim = points[0].is_array() ? points[0].size() : 0;
  if (dim == 0) throw Error(ErrorKind::schema, "/points/0: expected a coordinate list");
  std::vector<double> coords;
  for (std::size_t i = 0; i < n; ++i) {
    if (!is_numeric_array(points[i]) || points[i].size() != dim)
      throw Error(ErrorKind::schema, "/points/" + std::to_string(i) + ": bad coordinates");
    for (const auto& c : points[i]) coords.push_back(c.get<double>());
  }
  if (!is_numeric_array(times) || times.empty())
    throw Error(ErrorKind::schema, "/times: expected a non-empty list of numbers");
  const auto tv = times.get<std::vector<double>>();
  if (!dist.is_array() || dist.size() != tv.size())
    throw Error(ErrorKind::schema, "/dist: expected one matrix per time");
  if (!mass.is_array() || mass.size() != tv.size())
    throw Error(ErrorKind::schema, "/mass: expected one vector per time");
  std::vector<Eigen::MatrixXd> dm;
  std::vector<Eigen::VectorXd> mv;
  for (std::size_t k = 0; k < tv.size(); ++k) {
    dm.push_back(parse_dist_matrix(dist[k], n, "/dist/" + std::to_string(k)));
    if (!is_numeric_array(mass[k]) || mass[k].size() != n)
      throw Error(ErrorKind::schema, "/mass/" + std::to_string(k) + ": expected N numbers");
    Eigen::VectorXd m(n);
    for (std::size_t i = 0; i < n; ++i) m(i) = mass[k][i].get<double>();
    mv.push_back(m);
  }
  const double L = as_number(lip, "/log_lipschitz");
  if (L < 0) throw Error(ErrorKind::schema, "/log_lipschitz: must be >= 0");
  int dimension = j.contains("dimension") ? as_int(j.at("dimension"), "/dimension") : 0;
  return build_tabulated(std::move(coords), dim, tv, std::move(dm), std::move(mv), L, dimension, j);
}

inline FlowSpace model_from_json(const std::string& kind, const json& params) {
  const std::string where = "/params";
  if (!params.is_object()) throw Error(ErrorKind::schema, where + ": expected an object");
  if (kind == "gaussian") {
    GaussianSpec spec;
    spec.n = params.contains("n") ? as_int(params.at("n"), where + "/n") : 1;
    const int n = spec.n;
    if (n < 1 || n > 3) throw Error(ErrorKind::invalid_spec, where + "/n: must be 1, 2 or 3");
    spec.A = params.contains("A") ? parse_matrix_path(params.at("A"), n, where + "/A")
                                  : MatrixPath({Eigen::MatrixXd::Identity(n, n)});
    spec.a = params.contains("a") ? parse_matrix_path(params.at("a"), n, where + "/a")
                                  : MatrixPath({Eigen::MatrixXd::Zero(n, n)});
    spec.b = params.contains("b") ? parse_vector_path(params.at("b"), n, where + "/b")
                                  : VectorPath({Eigen::VectorXd::Zero(n)});
    if (params.contains("c")) spec.c = parse_scalar_path(params.at("c"), where + "/c");
    if (params.contains("extent")) spec.extent = as_number(params.at("extent"), where + "/extent");
    if (params.contains("resolution"))
      spec.resolution = as_int(params.at("resolution"), where + "/resolution");
    spec.window = parse_window(params, spec.window, where);
    return build_gaussian_flow(std::move(spec));
  }
  if (kind == "sphere") {
    SphereSpec spec;
    if (params.contains("n")) spec.n = as_int(params.at("n"), where + "/n");
    if (params.contains("lambda")) spec.lambda = parse_scalar_path(params.at("lambda"), where + "/lambda");
    if (params.contains("count")) spec.count = as_int(params.at("count"), where + "/count");
    spec.window = parse_window(params, spec.window, where);
    return build_sphere_flow(std::move(spec));
  }
  if (kind == "cone") {
    ConeSpec spec;
    if (params.contains("beta")) spec.beta = as_number(params.at("beta"), where + "/beta");
    if (params.contains("radial_extent"))
      spec.radial_extent = as_number(params.at("radial_extent"), where + "/radial_extent");
    if (params.contains("count")) spec.count = as_int(params.at("count"), where + "/count");
    if (params.contains("rings")) spec.rings = as_int(params.at("rings"), where + "/rings");
    spec.window = parse_window(params, spec.window, where);
    return build_cone(std::move(spec));
  }
  if (kind == "suspension") {
    SuspensionSpec spec;
    FlowSpace base = space_from_json(require(params, "base", where));
    if (params.contains("N")) spec.N = as_number(params.at("N"), where + "/N");
    if (params.contains("polar_count"))
      spec.polar_count = as_int(params.at("polar_count"), where + "/polar_count");
    if (params.contains("time_scaling")) {
      if (!params.at("time_scaling").is_boolean())
        throw Error(ErrorKind::schema, where + "/time_scaling: expected a boolean");
      spec.time_scaling = params.at("time_scaling").get<bool>();
    }
    if (params.contains("window")) spec.window = parse_window(params, TimeWindow{}, where);
    return build_suspension(base, spec);
  }
  if (kind == "product") {
    throw Error(ErrorKind::schema, "product spaces are built programmatically");
  }
  throw Error(ErrorKind::schema, "/kind: unknown kind \"" + kind + "\"");
}

}  // namespace detail

inline FlowSpace space_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorKind::schema, "/: expected an object");
  const auto& kind = detail::require(j, "kind", "");
  if (!kind.is_string()) throw Error(ErrorKind::schema, "/kind: expected a string");
  const std::string k = kind.get<std::string>();
  if (k == "custom") return detail::custom_from_json(j);
  return detail::model_from_json(k, detail::require(j, "params", ""));
}

inline FlowSpace load_space(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::schema, path + ": " + e.what());
  }
  return space_from_json(j);
}

// Alias used by the spec vocabulary.
inline FlowSpace load_custom(const std::string& path) {
  FlowSpace s = load_space(path);
  if (s.kind() != SpaceKind::custom) throw Error(ErrorKind::schema, "/kind: expected \"custom\"");
  return s;
}

// "n=2,lambda=shrink,count=300" -> {"n":2,"lambda":"shrink","count":300}
inline nlohmann::json parse_inline_params(const std::string& text) {
  nlohmann::json out = nlohmann::json::object();
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0)
      throw Error(ErrorKind::schema, "inline parameter '" + item + "' is not key=value");
    const std::string key = item.substr(0, eq), value = item.substr(eq + 1);
    char* end = nullptr;
    const double d = std::strtod(value.c_str(), &end);
    if (!value.empty() && end == value.c_str() + value.size()) {
      if (d == static_cast<double>(static_cast<long long>(d)) && value.find('.') == std::string::npos &&
          value.find('e') == std::string::npos)
        out[key] = static_cast<long long>(d);
      else
        out[key] = d;
    } else if (value == "true" || value == "false") {
      out[key] = value == "true";
    } else {
      out[key] = value;
    }
  }
  return out;
}

}  // namespace rfprobe

#endif  // RFPROBE_SPACE_IO_HPP
