#pragma once

// Adapter checkpoint format, all integers little-endian:
//
//   offset  size  field
//   0       8     magic "LRTAPAK1"
//   8       4     u32 format version (1)
//   12      4     u32 method id
//   16      20    u32 d, H, L, M, r
//   36      4     f32 alpha
//   40      8     u64 seed (frozen factors are regenerated from it)
//   48      4     u32 extra-dim count E
//   52      4E    u32 extra dims (NOLA k, or LoReTTA k_1..k_D)
//   52+4E         trainable factors as f32, in layout order, row-major
//
// Values are f64 in memory and f32 on disk, so saving rounds once; a loaded
// state saves back to identical bytes.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "lorta/adapters.hpp"
#include "lorta/config.hpp"
#include "lorta/error.hpp"

namespace lorta {

inline constexpr std::array<char, 8> kCheckpointMagic{'L', 'R', 'T', 'A',
                                                      'P', 'A', 'K', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::size_t kCheckpointFixedHeader = 52;

inline std::size_t checkpoint_header_size(const AdapterSpec& spec) {
  return kCheckpointFixedHeader + 4 * spec.extra_dims().size();
}

namespace detail {

class ByteWriter {
 public:
  explicit ByteWriter(std::size_t reserve) { buf_.reserve(reserve); }

  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(const char* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }

  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : b_(b) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{b_[pos_ + i]} << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{b_[pos_ + i]} << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::span<const std::uint8_t> bytes(std::size_t n) {
    need(n);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) {
      throw FormatError("checkpoint truncated at byte " + std::to_string(pos_) +
                        " (need " + std::to_string(n) + " more)");
    }
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

inline std::uint32_t narrow_u32(std::size_t v, const char* what) {
  if (v > std::numeric_limits<std::uint32_t>::max()) {
    throw FormatError(std::string("checkpoint: ") + what + " does not fit in u32");
  }
  return static_cast<std::uint32_t>(v);
}

// Header dimensions above this are rejected before any allocation.
inline constexpr std::uint32_t kMaxHeaderDim = 1u << 20;

inline std::uint64_t layout_scalars(const FactorLayout& layout) {
  std::uint64_t total = 0;
  for (const auto& [name, shape] : layout) {
    std::uint64_t n = 1;
    for (std::size_t e : shape) {
      if (__builtin_mul_overflow(n, std::uint64_t{e}, &n)) {
        throw FormatError("checkpoint: factor '" + name + "' size overflows");
      }
    }
    if (__builtin_add_overflow(total, n, &total)) {
      throw FormatError("checkpoint: payload size overflows");
    }
  }
  return total;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const AdapterState& st) {
  st.validate();
  const AdapterSpec& s = st.spec;
  const ModelConfig& c = st.config;
  detail::ByteWriter w(checkpoint_header_size(s) + 4 * scalar_count(st.trainable));
  w.raw(kCheckpointMagic.data(), kCheckpointMagic.size());
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(s.method));
  for (std::size_t v : {c.d, c.heads, c.layers, c.matrices, s.rank}) {
    w.u32(detail::narrow_u32(v, "dimension"));
  }
  w.f32(static_cast<float>(s.alpha));
  w.u64(s.seed);
  const auto extras = s.extra_dims();
  w.u32(detail::narrow_u32(extras.size(), "extra-dim count"));
  for (std::size_t e : extras) w.u32(detail::narrow_u32(e, "extra dim"));
  for (const auto& f : st.trainable) {
    for (double v : f.value.data()) {
      const float x = static_cast<float>(v);
      if (!std::isfinite(x)) {
        throw NumericError("checkpoint: factor '" + f.name +
                           "' has a value that is not finite as f32");
      }
      w.f32(x);
    }
  }
  return w.take();
}

inline AdapterState decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  const auto magic = r.bytes(kCheckpointMagic.size());
  if (std::memcmp(magic.data(), kCheckpointMagic.data(), magic.size()) != 0) {
    throw FormatError("checkpoint: bad magic (not an LRTAPAK1 file)");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported format version " +
                      std::to_string(version));
  }

  AdapterSpec spec;
  ModelConfig cfg;
  try {
    spec.method = method_from_id(r.u32());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  std::array<std::uint32_t, 5> dims{};
  for (auto& v : dims) {
    v = r.u32();
    if (v > detail::kMaxHeaderDim) {
      throw FormatError("checkpoint: implausible header dimension " +
                        std::to_string(v));
    }
  }
  cfg.d = dims[0];
  cfg.heads = dims[1];
  cfg.layers = dims[2];
  cfg.matrices = dims[3];
  spec.rank = dims[4];
  spec.alpha = r.f32();
  spec.seed = r.u64();
  const std::uint32_t n_extra = r.u32();
  if (n_extra > 64) {
    throw FormatError("checkpoint: implausible extra-dim count " +
                      std::to_string(n_extra));
  }
  std::vector<std::size_t> extras;
  for (std::uint32_t i = 0; i < n_extra; ++i) {
    const std::uint32_t v = r.u32();
    if (v > detail::kMaxHeaderDim) {
      throw FormatError("checkpoint: implausible extra dim " + std::to_string(v));
    }
    extras.push_back(v);
  }
  if (spec.method == Method::kNOLA) {
    if (extras.size() != 1) throw FormatError("checkpoint: NOLA needs one extra dim");
    spec.nola_k = extras[0];
  } else if (spec.method == Method::kLoReTTA) {
    spec.loretta_dims = extras;
  } else if (!extras.empty()) {
    throw FormatError("checkpoint: unexpected extra dims for " +
                      std::string(method_name(spec.method)));
  }
  try {
    spec.validate(cfg);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: invalid header: ") + e.what());
  }

  const FactorLayout layout = trainable_layout(spec, cfg);
  const std::uint64_t scalars = detail::layout_scalars(layout);
  if (r.remaining() / 4 != scalars || r.remaining() % 4 != 0) {
    throw FormatError("checkpoint: payload holds " +
                      std::to_string(r.remaining()) + " bytes, header implies " +
                      std::to_string(scalars) + " f32 values");
  }

  if (detail::layout_scalars(frozen_layout(spec, cfg)) > (std::uint64_t{1} << 32)) {
    throw FormatError("checkpoint: frozen factors implied by the header are too large");
  }

  AdapterState st{spec, cfg, {}, make_frozen(spec, cfg)};
  for (const auto& [name, shape] : layout) {
    DenseTensor t(shape);
    for (double& v : t.data()) {
      const float x = r.f32();
      if (!std::isfinite(x)) {
        throw FormatError("checkpoint: non-finite value in factor '" + name + "'");
      }
      v = x;
    }
    st.trainable.push_back({name, std::move(t)});
  }
  return st;
}

inline std::uint64_t save_checkpoint(const AdapterState& st,
                                     const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(st);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write to '" + path.string() + "' failed");
  return bytes.size();
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  const auto size = static_cast<std::size_t>(in.tellg());
  std::vector<std::uint8_t> bytes(size);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(bytes.data()),
          static_cast<std::streamsize>(size));
  if (!in) throw FormatError("read from '" + path.string() + "' failed");
  return bytes;
}

inline AdapterState load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

// In-memory values after a save/load cycle.
inline AdapterState round_to_f32(AdapterState st) {
  st.spec.alpha = static_cast<float>(st.spec.alpha);
  for (auto& f : st.trainable)
    for (double& v : f.value.data()) v = static_cast<float>(v);
  return st;
}

}  // namespace lorta
