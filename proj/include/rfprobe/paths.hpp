#ifndef RFPROBE_PATHS_HPP
#define RFPROBE_PATHS_HPP

// Polynomial coefficient paths t -> value used by the model flows.

#include <Eigen/Dense>

#include <cctype>
#include <cstdlib>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rfprobe/error.hpp"

namespace rfprobe {

template <typename Value>
class PolyPath {
 public:
  PolyPath() = default;
  explicit PolyPath(std::vector<Value> coeffs) : coeffs_(std::move(coeffs)) {
    if (coeffs_.empty()) throw Error(ErrorKind::invalid_spec, "empty coefficient path");
  }

  Value operator()(double t) const {
    Value acc = coeffs_.back();
    for (std::size_t k = coeffs_.size() - 1; k-- > 0;) acc = acc * t + coeffs_[k];
    return acc;
  }

  Value derivative(double t) const {
    if (coeffs_.size() == 1) return coeffs_[0] * 0.0;
    Value acc = coeffs_.back() * static_cast<double>(coeffs_.size() - 1);
    for (std::size_t k = coeffs_.size() - 1; k-- > 1;)
      acc = acc * t + coeffs_[k] * static_cast<double>(k);
    return acc;
  }

  bool is_constant() const {
    for (std::size_t k = 1; k < coeffs_.size(); ++k)
      if (!is_zero(coeffs_[k])) return false;
    return true;
  }

  const std::vector<Value>& coeffs() const { return coeffs_; }

 private:
  static bool is_zero(double v) { return v == 0.0; }
  template <typename M>
  static bool is_zero(const M& m) { return m.isZero(0.0); }

  std::vector<Value> coeffs_{Value{}};
};

using ScalarPath = PolyPath<double>;
using MatrixPath = PolyPath<Eigen::MatrixXd>;
using VectorPath = PolyPath<Eigen::VectorXd>;

inline ScalarPath constant_path(double v) { return ScalarPath({v}); }

// Parses expressions such as "1-2t", "0.5 + t^2", "3". Only the variable t is allowed.
inline ScalarPath parse_polynomial(std::string_view text) {
  std::string s;
  for (char c : text)
    if (!std::isspace(static_cast<unsigned char>(c))) s.push_back(c);
  if (s.empty()) throw Error(ErrorKind::invalid_spec, "empty polynomial expression");

  std::vector<double> coeffs(1, 0.0);
  std::size_t pos = 0;
  auto fail = [&]() {
    throw Error(ErrorKind::invalid_spec, "cannot parse polynomial '" + std::string(text) + "'");
  };
  while (pos < s.size()) {
    double sign = 1.0;
    if (s[pos] == '+' || s[pos] == '-') {
      if (s[pos] == '-') sign = -1.0;
      ++pos;
    } else if (pos != 0) {
      fail();
    }
    double value = 1.0;
    bool have_number = false;
    if (pos < s.size() && (std::isdigit(static_cast<unsigned char>(s[pos])) || s[pos] == '.')) {
      const char* begin = s.c_str() + pos;
      char* end = nullptr;
      value = std::strtod(begin, &end);
      if (end == begin) fail();
      pos += static_cast<std::size_t>(end - begin);
      have_number = true;
    }
    std::size_t power = 0;
    if (pos < s.size() && s[pos] == '*') ++pos;
    if (pos < s.size() && s[pos] == 't') {
      ++pos;
      power = 1;
      if (pos < s.size() && s[pos] == '^') {
        ++pos;
        const char* begin = s.c_str() + pos;
        char* end = nullptr;
        long p = std::strtol(begin, &end, 10);
        if (end == begin || p < 0 || p > 16) fail();
        pos += static_cast<std::size_t>(end - begin);
        power = static_cast<std::size_t>(p);
      }
    } else if (!have_number) {
      fail();
    }
    if (coeffs.size() <= power) coeffs.resize(power + 1, 0.0);
    coeffs[power] += sign * value;
  }
  return ScalarPath(std::move(coeffs));
}

}  // namespace rfprobe

#endif  // RFPROBE_PATHS_HPP
