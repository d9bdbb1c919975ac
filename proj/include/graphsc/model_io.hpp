#pragma once

// Binary parameter files.
//
//   "GSCNPARM"            8-byte magic
//   u32 version           currently 1
//   descriptor            u32 n, n x u32 init widths; u32 blocks; u32 units per
//                         block; u32 m, m x u32 head widths; u32 norm groups;
//                         f32 leaky slope
//   u64 count, f32[count] parameters in declaration order
//   optional "ADAMSTAT"   u64 steps, then first and second moments as above
//
// All integers and floats are little-endian.

#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>

#include "graphsc/training.hpp"

namespace graphsc {

inline constexpr std::array<char, 8> kModelMagic = {'G', 'S', 'C', 'N', 'P', 'A', 'R', 'M'};
inline constexpr std::array<char, 8> kAdamMagic = {'A', 'D', 'A', 'M', 'S', 'T', 'A', 'T'};
inline constexpr std::uint32_t kModelFormatVersion = 1;

namespace detail {

template <class T>
void put_le(std::ostream& out, T value) {
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.write(bytes.data(), sizeof(T));
}

template <class T>
T get_le(std::istream& in, const std::string& what) {
  std::array<char, sizeof(T)> bytes;
  if (!in.read(bytes.data(), sizeof(T))) fail_validation(what + ": truncated file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

inline void put_widths(std::ostream& out, const std::vector<std::size_t>& widths) {
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(widths.size()));
  for (std::size_t w : widths) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(w));
}

inline std::vector<std::size_t> get_widths(std::istream& in, const std::string& what) {
  const auto n = get_le<std::uint32_t>(in, what);
  if (n > 64) fail_validation(what + ": implausible layer count");
  std::vector<std::size_t> widths(n);
  for (auto& w : widths) w = get_le<std::uint32_t>(in, what);
  return widths;
}

inline void put_tensors(std::ostream& out, const ScNetModel<float>& m) {
  put_le<std::uint64_t>(out, m.parameter_count());
  m.visit([&](const std::string&, const float* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) put_le<float>(out, p[i]);
  });
}

inline void get_tensors(std::istream& in, ScNetModel<float>& m, const std::string& what) {
  const auto count = get_le<std::uint64_t>(in, what);
  if (count != m.parameter_count()) fail_validation(what + ": parameter count does not match the architecture");
  m.visit([&](const std::string& name, float* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = get_le<float>(in, what);
      if (!std::isfinite(p[i])) fail_validation(what + ": non-finite value in " + name);
    }
  });
}

}  // namespace detail

inline void write_architecture(std::ostream& out, const Architecture& a) {
  detail::put_widths(out, a.init_widths);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(a.blocks));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(a.units_per_block));
  detail::put_widths(out, a.head_widths);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(a.norm_groups));
  detail::put_le<float>(out, static_cast<float>(a.leaky_slope));
}

inline Architecture read_architecture(std::istream& in, const std::string& what) {
  Architecture a;
  a.init_widths = detail::get_widths(in, what);
  a.blocks = detail::get_le<std::uint32_t>(in, what);
  a.units_per_block = detail::get_le<std::uint32_t>(in, what);
  a.head_widths = detail::get_widths(in, what);
  a.norm_groups = detail::get_le<std::uint32_t>(in, what);
  a.leaky_slope = static_cast<double>(detail::get_le<float>(in, what));
  return a;
}

inline bool same_descriptor(const Architecture& a, const Architecture& b) {
  return a.init_widths == b.init_widths && a.blocks == b.blocks && a.units_per_block == b.units_per_block &&
         a.head_widths == b.head_widths && a.norm_groups == b.norm_groups &&
         static_cast<float>(a.leaky_slope) == static_cast<float>(b.leaky_slope);
}

/// Writes parameters, plus optimizer state when `adam` is given.
inline void save_model(const std::filesystem::path& path, const ScNetModel<float>& model,
                       const AdamOptimizer<float>* adam = nullptr) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail_io("cannot write " + path.string());
  out.write(kModelMagic.data(), kModelMagic.size());
  detail::put_le<std::uint32_t>(out, kModelFormatVersion);
  write_architecture(out, model.arch);
  detail::put_tensors(out, model);
  if (adam) {
    out.write(kAdamMagic.data(), kAdamMagic.size());
    detail::put_le<std::uint64_t>(out, adam->steps());
    detail::put_tensors(out, adam->first_moment());
    detail::put_tensors(out, adam->second_moment());
  }
  if (!out.flush()) fail_io("error writing " + path.string());
}

struct LoadedModel {
  ScNetModel<float> model;
  std::optional<AdamOptimizer<float>> adam;
};

/// Reads a parameter file and checks its descriptor against `expected`.
/// The optimizer section, if present, is restored with `weight_decay`.
inline LoadedModel load_model(const std::filesystem::path& path, const Architecture& expected,
                              double weight_decay = 0.0) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_io("cannot open " + path.string());
  const std::string what = path.string();
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kModelMagic) fail_validation(what + ": not a model file");
  const auto version = detail::get_le<std::uint32_t>(in, what);
  if (version != kModelFormatVersion) fail_validation(what + ": unsupported format version " + std::to_string(version));
  const Architecture arch = read_architecture(in, what);
  if (!same_descriptor(arch, expected)) fail_validation(what + ": architecture descriptor mismatch");

  LoadedModel out{ScNetModel<float>::zeros(expected), std::nullopt};
  detail::get_tensors(in, out.model, what);

  std::array<char, 8> tag{};
  if (in.read(tag.data(), tag.size())) {
    if (tag != kAdamMagic) fail_validation(what + ": unknown trailing section");
    AdamOptimizer<float> adam(expected, weight_decay);
    adam.set_steps(detail::get_le<std::uint64_t>(in, what));
    detail::get_tensors(in, adam.first_moment(), what);
    detail::get_tensors(in, adam.second_moment(), what);
    out.adam = std::move(adam);
  } else if (in.gcount() != 0) {
    fail_validation(what + ": truncated section tag");
  }
  return out;
}

}  // namespace graphsc
