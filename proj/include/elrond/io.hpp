#pragma once

#include <bit>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

namespace elrond::io {

// Artifact formats store raw 64-bit floats; this codebase targets
// little-endian hosts only and refuses to compile elsewhere.
static_assert(std::endian::native == std::endian::little,
              "artifact formats assume a little-endian host");

inline void write_bytes(std::ostream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!out) throw std::runtime_error("io: write failed");
}

inline void write_u32(std::ostream& out, std::uint32_t v) { write_bytes(out, &v, 4); }
inline void write_u64(std::ostream& out, std::uint64_t v) { write_bytes(out, &v, 8); }
inline void write_u8(std::ostream& out, std::uint8_t v) { write_bytes(out, &v, 1); }

inline void write_f64_span(std::ostream& out, std::span<const double> v) {
  write_bytes(out, v.data(), v.size() * sizeof(double));
}

inline void read_bytes(std::istream& in, void* p, std::size_t n, const char* ctx) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n)
    throw std::runtime_error(std::string("io: truncated read (") + ctx + ")");
}

inline std::uint32_t read_u32(std::istream& in, const char* ctx) {
  std::uint32_t v;
  read_bytes(in, &v, 4, ctx);
  return v;
}

inline std::uint64_t read_u64(std::istream& in, const char* ctx) {
  std::uint64_t v;
  read_bytes(in, &v, 8, ctx);
  return v;
}

inline std::uint8_t read_u8(std::istream& in, const char* ctx) {
  std::uint8_t v;
  read_bytes(in, &v, 1, ctx);
  return v;
}

inline void read_f64_span(std::istream& in, std::span<double> v, const char* ctx) {
  read_bytes(in, v.data(), v.size() * sizeof(double), ctx);
}

inline void write_magic(std::ostream& out, const char magic[5]) { write_bytes(out, magic, 4); }

inline void check_magic_version(std::istream& in, const char magic[5], std::uint32_t version,
                                const std::string& path) {
  char got[5] = {0, 0, 0, 0, 0};
  read_bytes(in, got, 4, "magic");
  if (std::memcmp(got, magic, 4) != 0)
    throw std::runtime_error(path + ": bad magic '" + std::string(got, 4) + "', expected '" +
                             std::string(magic, 4) + "'");
  const std::uint32_t v = read_u32(in, "version");
  if (v != version)
    throw std::runtime_error(path + ": unsupported version " + std::to_string(v) + ", expected " +
                             std::to_string(version));
}

inline std::uint64_t fnv1a_64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hash_hex(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[h & 0xf];
    h >>= 4;
  }
  return s;
}

inline std::string file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("file_hash: cannot open " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    const auto got = static_cast<std::size_t>(in.gcount());
    if (got) h = fnv1a_64(buf, got, h);
  }
  return hash_hex(h);
}

inline nlohmann::json load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_json: cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("load_json: " + path.string() + ": " + e.what());
  }
  return j;
}

inline void save_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_json: cannot open " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("save_json: write failed for " + path.string());
}

// Worker cap for parallel stages: ELROND_THREADS wins, else hardware count.
inline std::size_t worker_count() {
  if (const char* env = std::getenv("ELROND_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<std::size_t>(v);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw ? hw : 1;
}

}  // namespace elrond::io
