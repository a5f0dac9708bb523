#pragma once

#include <array>
#include <cmath>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "sdaie/common.hpp"
#include "sdaie/image.hpp"

namespace sdaie {

/// Compass directions in 45-degree steps, clockwise from east.
enum class Direction { E, SE, S, SW, W, NW, N, NE, none };

inline constexpr std::array<std::string_view, 9> kDirectionNames{"E", "SE", "S", "SW", "W", "NW", "N", "NE", "none"};

inline std::string_view direction_name(Direction d) { return kDirectionNames[static_cast<int>(d)]; }

inline Direction parse_direction(std::string_view s) {
  for (std::size_t i = 0; i < kDirectionNames.size(); ++i)
    if (kDirectionNames[i] == s) return static_cast<Direction>(i);
  throw Error("unknown direction '" + std::string(s) + "'");
}

inline constexpr int kKernelSide = 5;
inline constexpr int kBankSize = 30;

/// 5x5 high-pass kernel. Coefficients are stored row-major; row 0 is the top.
struct Kernel {
  std::array<double, 25> coef{};
  char prototype = 'a';
  Direction direction = Direction::E;

  double& at(int row, int col) { return coef[static_cast<std::size_t>(row * kKernelSide + col)]; }
  double at(int row, int col) const { return coef[static_cast<std::size_t>(row * kKernelSide + col)]; }

  /// Common denominator of the prototype's rational coefficients.
  int denominator() const {
    switch (prototype) {
      case 'b': return 3;
      case 'c': return 2;
      case 'd':
      case 'f': return 4;
      case 'e':
      case 'g': return 12;
      default: return 1;
    }
  }

  /// Exact rational sum, computed on the integer numerators.
  long double coefficient_sum() const {
    const int den = denominator();
    long long num = 0;
    for (double c : coef) {
      const long long n = std::llround(c * den);
      if (std::abs(c * den - static_cast<double>(n)) > 1e-9) throw Error("kernel coefficient is not a multiple of 1/den");
      num += n;
    }
    return static_cast<long double>(num) / den;
  }

  double dominant_magnitude() const {
    double m = 0.0;
    for (double c : coef) m = std::max(m, std::abs(c));
    return m;
  }

  bool operator==(const Kernel&) const = default;
};

namespace detail {

inline std::pair<int, int> step(Direction d) {  // (dy, dx), y grows downward
  switch (d) {
    case Direction::E: return {0, 1};
    case Direction::SE: return {1, 1};
    case Direction::S: return {1, 0};
    case Direction::SW: return {1, -1};
    case Direction::W: return {0, -1};
    case Direction::NW: return {-1, -1};
    case Direction::N: return {-1, 0};
    case Direction::NE: return {-1, 1};
    case Direction::none: break;
  }
  throw Error("direction has no step");
}

// 1-D prototypes: (offset along the direction, coefficient).
inline std::vector<std::pair<int, double>> line_taps(char proto) {
  switch (proto) {
    case 'a': return {{0, -1.0}, {1, 1.0}};
    case 'b': return {{-1, 1.0 / 3.0}, {0, -1.0}, {1, 1.0}, {2, -1.0 / 3.0}};
    case 'c': return {{-1, 0.5}, {0, -1.0}, {1, 0.5}};
    default: break;
  }
  throw Error("prototype is not one-dimensional");
}

inline Kernel grid_prototype(char proto) {
  // Base orientation points east: support on the left and centre columns.
  static constexpr std::array<double, 25> edge3{
      0, 0, 0, 0, 0,  //
      0, -1, 2, 0, 0,  //
      0, 2, -4, 0, 0,  //
      0, -1, 2, 0, 0,  //
      0, 0, 0, 0, 0};
  static constexpr std::array<double, 25> edge5{
      -1, 2, -2, 0, 0,   //
      2, -6, 8, 0, 0,    //
      -2, 8, -12, 0, 0,  //
      2, -6, 8, 0, 0,    //
      -1, 2, -2, 0, 0};
  static constexpr std::array<double, 25> square3{
      0, 0, 0, 0, 0,  //
      0, -1, 2, -1, 0,  //
      0, 2, -4, 2, 0,  //
      0, -1, 2, -1, 0,  //
      0, 0, 0, 0, 0};
  static constexpr std::array<double, 25> square5{
      -1, 2, -2, 2, -1,    //
      2, -6, 8, -6, 2,     //
      -2, 8, -12, 8, -2,   //
      2, -6, 8, -6, 2,     //
      -1, 2, -2, 2, -1};
  Kernel k;
  k.prototype = proto;
  double scale = 1.0;
  switch (proto) {
    case 'd': k.coef = edge3; scale = 4.0; k.direction = Direction::E; break;
    case 'e': k.coef = edge5; scale = 12.0; k.direction = Direction::E; break;
    case 'f': k.coef = square3; scale = 4.0; k.direction = Direction::none; break;
    case 'g': k.coef = square5; scale = 12.0; k.direction = Direction::none; break;
    default: throw Error("prototype is not two-dimensional");
  }
  for (double& c : k.coef) c /= scale;
  return k;
}

inline Kernel rotate90_cw(const Kernel& k) {
  Kernel r = k;
  for (int row = 0; row < kKernelSide; ++row)
    for (int col = 0; col < kKernelSide; ++col) r.at(row, col) = k.at(kKernelSide - 1 - col, row);
  return r;
}

}  // namespace detail

/// The seven prototypes in their base orientation:
/// (a) first-order difference, (b) third-order difference, (c) second-order
/// difference, (d) 3x3 edge, (e) 5x5 edge, (f) 3x3 square, (g) 5x5 square.
/// Each is zero-sum with largest coefficient magnitude 1.
inline std::vector<Kernel> build_prototypes();

/// Orients a prototype. (a)/(b)/(c) accept all eight compass directions
/// (opposite directions of (c) coincide), (d)/(e) the four cardinal ones,
/// (f)/(g) only Direction::none.
inline Kernel rotate_kernel(char prototype, Direction direction) {
  if (prototype >= 'a' && prototype <= 'c') {
    if (direction == Direction::none) throw Error("prototype requires a compass direction");
    const auto [dy, dx] = detail::step(direction);
    Kernel k;
    k.prototype = prototype;
    k.direction = direction;
    for (const auto& [t, c] : detail::line_taps(prototype)) k.at(2 + t * dy, 2 + t * dx) = c;
    return k;
  }
  if (prototype == 'd' || prototype == 'e') {
    int turns = 0;
    switch (direction) {
      case Direction::E: turns = 0; break;
      case Direction::S: turns = 1; break;
      case Direction::W: turns = 2; break;
      case Direction::N: turns = 3; break;
      default: throw Error("prototype '" + std::string(1, prototype) + "' only rotates to cardinal directions");
    }
    Kernel k = detail::grid_prototype(prototype);
    for (int i = 0; i < turns; ++i) k = detail::rotate90_cw(k);
    k.direction = direction;
    return k;
  }
  if (prototype == 'f' || prototype == 'g') {
    if (direction != Direction::none) throw Error("prototype '" + std::string(1, prototype) + "' is used without rotation");
    return detail::grid_prototype(prototype);
  }
  throw Error("unknown prototype '" + std::string(1, prototype) + "'");
}

inline Kernel rotate_kernel(const Kernel& prototype, Direction direction) {
  return rotate_kernel(prototype.prototype, direction);
}

inline std::vector<Kernel> build_prototypes() {
  return {rotate_kernel('a', Direction::E), rotate_kernel('b', Direction::E), rotate_kernel('c', Direction::E),
          rotate_kernel('d', Direction::E), rotate_kernel('e', Direction::E), rotate_kernel('f', Direction::none),
          rotate_kernel('g', Direction::none)};
}

/// 30 kernels in fixed order: a x8, b x8, c x4, d x4, e x4, f, g.
inline std::vector<Kernel> build_bank() {
  using D = Direction;
  static constexpr std::array<D, 8> compass{D::NE, D::E, D::SE, D::S, D::SW, D::W, D::NW, D::N};
  static constexpr std::array<D, 4> half{D::E, D::S, D::NE, D::SE};
  static constexpr std::array<D, 4> cardinal{D::E, D::S, D::W, D::N};
  std::vector<Kernel> bank;
  bank.reserve(kBankSize);
  for (char p : {'a', 'b'})
    for (D d : compass) bank.push_back(rotate_kernel(p, d));
  for (D d : half) bank.push_back(rotate_kernel('c', d));
  for (char p : {'d', 'e'})
    for (D d : cardinal) bank.push_back(rotate_kernel(p, d));
  bank.push_back(rotate_kernel('f', D::none));
  bank.push_back(rotate_kernel('g', D::none));
  return bank;
}

inline nlohmann::json bank_to_json(const std::vector<Kernel>& bank) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& k : bank) {
    nlohmann::json grid = nlohmann::json::array();
    for (int r = 0; r < kKernelSide; ++r) {
      nlohmann::json row = nlohmann::json::array();
      for (int c = 0; c < kKernelSide; ++c) row.push_back(k.at(r, c));
      grid.push_back(std::move(row));
    }
    out.push_back({{"prototype", std::string(1, k.prototype)},
                   {"direction", direction_name(k.direction)},
                   {"coefficients", std::move(grid)}});
  }
  return out;
}

inline std::vector<Kernel> bank_from_json(const nlohmann::json& j) {
  std::vector<Kernel> bank;
  for (const auto& e : j) {
    Kernel k;
    k.prototype = e.at("prototype").get<std::string>().at(0);
    k.direction = parse_direction(e.at("direction").get<std::string>());
    const auto& grid = e.at("coefficients");
    for (int r = 0; r < kKernelSide; ++r)
      for (int c = 0; c < kKernelSide; ++c) k.at(r, c) = grid.at(r).at(c).get<double>();
    bank.push_back(k);
  }
  return bank;
}

/// ITU-R BT.601 luma of an RGB patch stored interleaved (S x S x 3).
inline std::vector<double> luminance(const Image& patch) {
  std::vector<double> lum(static_cast<std::size_t>(patch.height) * patch.width);
  for (std::size_t i = 0; i < lum.size(); ++i) {
    const float* p = &patch.data[i * 3];
    lum[i] = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
  }
  return lum;
}

/// Residual maps of a square patch: one row per kernel, S*S columns.
template <typename T>
class FilterBank {
 public:
  FilterBank() : kernels_(build_bank()) {
    for (const auto& k : kernels_) {
      std::vector<Tap> taps;
      for (int r = 0; r < kKernelSide; ++r)
        for (int c = 0; c < kKernelSide; ++c)
          if (k.at(r, c) != 0.0 && !(r == 2 && c == 2)) taps.push_back({r - 2, c - 2, k.at(r, c)});
      taps_.push_back(std::move(taps));
    }
  }

  const std::vector<Kernel>& kernels() const { return kernels_; }

  /// Correlates the luminance of `patch` with each kernel under symmetric
  /// padding. Every kernel sums to zero, so the response is accumulated as
  /// sum_t c_t * (L[p + t] - L[p]); constant regions give exactly zero.
  Mat<T> apply(const Image& patch) const {
    if (patch.height != patch.width) throw Error("apply_bank: patch must be square");
    const int s = patch.height;
    if (s < kKernelSide) throw Error("apply_bank: patch side must be at least 5");
    const auto lum = luminance(patch);
    const int ps = s + 4;
    std::vector<double> padded(static_cast<std::size_t>(ps) * ps);
    for (int y = 0; y < ps; ++y)
      for (int x = 0; x < ps; ++x)
        padded[static_cast<std::size_t>(y) * ps + x] =
            lum[static_cast<std::size_t>(reflect_index(y - 2, s)) * s + reflect_index(x - 2, s)];

    Mat<T> out(kBankSize, static_cast<Eigen::Index>(s) * s);
    std::vector<double> acc(static_cast<std::size_t>(s) * s);
    for (int k = 0; k < kBankSize; ++k) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (const auto& tap : taps_[static_cast<std::size_t>(k)]) {
        for (int y = 0; y < s; ++y) {
          const double* center = &padded[static_cast<std::size_t>(y + 2) * ps + 2];
          const double* shifted = &padded[static_cast<std::size_t>(y + 2 + tap.dy) * ps + 2 + tap.dx];
          double* dst = &acc[static_cast<std::size_t>(y) * s];
          for (int x = 0; x < s; ++x) dst[x] += tap.coef * (shifted[x] - center[x]);
        }
      }
      for (std::size_t i = 0; i < acc.size(); ++i) out(k, static_cast<Eigen::Index>(i)) = static_cast<T>(acc[i]);
    }
    return out;
  }

 private:
  struct Tap {
    int dy, dx;
    double coef;
  };
  std::vector<Kernel> kernels_;
  std::vector<std::vector<Tap>> taps_;
};

}  // namespace sdaie
