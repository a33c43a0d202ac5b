#include "xsf/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "xsf/error.hpp"

namespace xsf {

const char* to_string(Partition p) {
  switch (p) {
    case Partition::LN: return "LN";
    case Partition::Adapted: return "ADAPTED";
    case Partition::Frozen: return "FROZEN";
  }
  return "?";
}

namespace {

class Writer {
 public:
  void bytes(std::string_view s) { out_.append(s); }
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}

  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == in_.size(); }

  std::string_view take(std::size_t n, const char* what) {
    if (in_.size() - pos_ < n) {
      fail(std::string("truncated while reading ") + what + " (need " + std::to_string(n) + " bytes, have " +
           std::to_string(in_.size() - pos_) + ")");
    }
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8(const char* what) { return static_cast<std::uint8_t>(take(1, what)[0]); }
  std::uint32_t u32(const char* what) {
    auto s = take(4, what);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<std::uint8_t>(s[i]);
    return v;
  }
  std::uint64_t u64(const char* what) {
    auto s = take(8, what);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<std::uint8_t>(s[i]);
    return v;
  }
  std::string str(const char* what) {
    const auto n = u32(what);
    return std::string(take(n, what));
  }

  [[noreturn]] void fail(const std::string& msg, std::size_t at) const {
    throw Error(ErrorKind::CorruptCheckpoint, "at byte offset " + std::to_string(at) + ": " + msg);
  }
  [[noreturn]] void fail(const std::string& msg) const { fail(msg, pos_); }

 private:
  std::string_view in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_container(const Container& c) {
  Writer w;
  w.bytes(std::string_view(kContainerMagic, 4));
  w.u32(kContainerVersion);
  w.str(c.header);
  w.u32(static_cast<std::uint32_t>(c.entries.size()));
  for (const auto& e : c.entries) {
    w.str(e.name);
    w.u8(static_cast<std::uint8_t>(e.tag));
    w.u32(static_cast<std::uint32_t>(e.value.rank()));
    for (auto d : e.value.dims()) w.u64(d);
    for (float v : e.value.data()) w.u32(std::bit_cast<std::uint32_t>(v));
  }
  return w.take();
}

Container decode_container(std::string_view bytes) {
  Reader r(bytes);
  if (r.take(4, "magic") != std::string_view(kContainerMagic, 4)) r.fail("bad magic", 0);
  const auto version_at = r.offset();
  const auto version = r.u32("version");
  if (version != kContainerVersion) r.fail("unsupported version " + std::to_string(version), version_at);
  Container c;
  c.header = r.str("header text");
  const auto count = r.u32("entry count");
  for (std::uint32_t i = 0; i < count; ++i) {
    ContainerEntry e;
    e.name = r.str("entry name");
    const auto tag_at = r.offset();
    const auto tag = r.u8("tag");
    if (tag > 2) r.fail("invalid tag " + std::to_string(tag) + " for '" + e.name + "'", tag_at);
    e.tag = static_cast<Partition>(tag);
    const auto ndim_at = r.offset();
    const auto ndim = r.u32("ndim");
    if (ndim > 8) r.fail("implausible ndim " + std::to_string(ndim), ndim_at);
    Shape dims;
    std::uint64_t n = 1;
    for (std::uint32_t k = 0; k < ndim; ++k) {
      const auto dim_at = r.offset();
      const auto d = r.u64("dim");
      if (d == 0 || d > (1ULL << 32)) r.fail("invalid dim " + std::to_string(d), dim_at);
      n *= d;
      if (n > (1ULL << 32)) r.fail("tensor too large", dim_at);
      dims.push_back(static_cast<std::size_t>(d));
    }
    const auto raw = r.take(n * 4, "tensor data");
    std::vector<float> data(n);
    for (std::size_t k = 0; k < n; ++k) {
      std::uint32_t bits = 0;
      for (int b = 3; b >= 0; --b) bits = (bits << 8) | static_cast<std::uint8_t>(raw[k * 4 + b]);
      data[k] = std::bit_cast<float>(bits);
    }
    e.value = Tensor(std::move(dims), std::move(data));
    c.entries.push_back(std::move(e));
  }
  if (!r.at_end()) r.fail("trailing bytes after last entry");
  return c;
}

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_file_bytes(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

void write_container(const Container& c, const std::filesystem::path& path) {
  write_file_bytes(path, encode_container(c));
}

Container read_container(const std::filesystem::path& path) { return decode_container(read_file_bytes(path)); }

}  // namespace xsf
