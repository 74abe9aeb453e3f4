#include "psinet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "psinet/error.hpp"

namespace psinet {

namespace {

constexpr char kMagic[4] = {'P', 'S', 'N', 'F'};
constexpr std::string_view kFingerprintEntry = "meta/fingerprint";

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  std::size_t offset() const noexcept { return pos_; }
  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n) {
      throw FormatError(std::string("truncated container while reading ") + what, pos_);
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return b_[pos_++];
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    const std::uint16_t v = static_cast<std::uint16_t>(b_[pos_] | (b_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const noexcept { return pos_ == b_.size(); }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

std::size_t entry_size(const std::string& name, const Tensor& t) {
  return 2 + name.size() + 1 + 1 + 4 * t.rank() + 4 * t.numel();
}

ModelParams rename_for(const ArchitectureSpec& spec, const ModelParams& params) {
  ModelParams out(fingerprint(spec));
  for (const auto& [name, t] : params.tensors()) {
    auto [part, rest] = split_param_name(name);
    const std::string layer = rest.substr(0, rest.rfind('.'));
    const std::string role = rest.substr(rest.rfind('.') + 1);
    std::size_t index = 0;
    try {
      index = spec.layer_index(layer);
    } catch (const ConfigError&) {
      throw AlignmentError("checkpoint entry '" + name + "' names no layer of '" + spec.name + "'");
    }
    const Partition target = spec.in_grouped_region(index) ? Partition{0} : Partition{};
    out.set(make_param_name(target, layer, role), t);
  }
  return out;
}

}  // namespace

std::vector<std::uint8_t> encode_container(const TensorEntries& entries) {
  static_assert(std::endian::native == std::endian::little, "little-endian host assumed");
  Writer w;
  w.bytes(kMagic, 4);
  w.u16(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    if (name.size() > 0xffff) throw FormatError("tensor name too long", 0);
    if (t.rank() > 0xff) throw FormatError("tensor rank too large", 0);
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u8(0);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    w.bytes(t.raw(), t.numel() * sizeof(float));
  }
  return w.take();
}

TensorEntries decode_container(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw FormatError("bad magic", 0);
  const std::size_t version_at = r.offset();
  const std::uint16_t version = r.u16("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported container version " + std::to_string(version), version_at);
  }
  const std::uint32_t count = r.u32("entry count");
  TensorEntries entries;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::uint16_t len = r.u16("name length");
    const auto name_bytes = r.take(len, "name");
    std::string name(name_bytes.begin(), name_bytes.end());
    const std::size_t dtype_at = r.offset();
    if (r.u8("dtype") != 0) throw FormatError("unknown dtype for '" + name + "'", dtype_at);
    const std::uint8_t rank = r.u8("rank");
    Shape shape;
    for (std::uint8_t d = 0; d < rank; ++d) shape.push_back(r.u32("dimension"));
    const std::size_t n = shape_numel(shape);
    const auto payload = r.take(n * sizeof(float), "payload");
    std::vector<float> data(n);
    std::memcpy(data.data(), payload.data(), payload.size());
    entries.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (!r.done()) throw FormatError("trailing bytes after last entry", r.offset());
  return entries;
}

std::vector<std::uint8_t> encode_params(const ModelParams& params) {
  TensorEntries entries;
  const std::uint64_t f = params.fingerprint();
  Tensor fp({4});
  for (int i = 0; i < 4; ++i) fp[i] = static_cast<float>((f >> (16 * i)) & 0xffffu);
  entries.emplace_back(std::string(kFingerprintEntry), std::move(fp));
  for (const auto& [name, t] : params.tensors()) entries.emplace_back(name, t);
  return encode_container(entries);
}

ModelParams decode_params(std::span<const std::uint8_t> bytes) {
  ModelParams out;
  for (auto& [name, t] : decode_container(bytes)) {
    if (name == kFingerprintEntry) {
      if (t.numel() != 4) throw FormatError("malformed fingerprint entry", 0);
      std::uint64_t f = 0;
      for (int i = 0; i < 4; ++i) f |= std::uint64_t(t[i]) << (16 * i);
      out.set_fingerprint(f);
      continue;
    }
    out.set(std::move(name), std::move(t));
  }
  return out;
}

std::size_t serialized_size(const ModelParams& params) {
  std::size_t n = 4 + 2 + 4;
  for (const auto& [name, t] : params.tensors()) n += entry_size(name, t);
  return n;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  write_bytes(path, encode_params(params));
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  return decode_params(read_bytes(path));
}

ModelParams adapt_params(const ArchitectureSpec& spec, const ModelParams& params) {
  try {
    check_params(spec, params);
    return params;
  } catch (const AlignmentError& first) {
    const bool single_group = !spec.regulation || spec.regulation->mapping.group_count() == 1;
    if (!single_group) throw;
    ModelParams renamed = rename_for(spec, params);
    try {
      check_params(spec, renamed);
    } catch (const AlignmentError&) {
      throw first;
    }
    return renamed;
  }
}

ModelParams load_checkpoint_for(const std::filesystem::path& path, const ArchitectureSpec& spec) {
  return adapt_params(spec, load_checkpoint(path));
}

void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
  ds.validate();
  TensorEntries entries;
  entries.emplace_back("data/images", ds.images);
  Tensor labels({ds.size()});
  for (std::size_t i = 0; i < ds.size(); ++i) labels[i] = static_cast<float>(ds.labels[i]);
  entries.emplace_back("data/labels", std::move(labels));
  entries.emplace_back("data/num_classes", Tensor({1}, static_cast<float>(ds.num_classes)));
  if (!ds.channel_mean.empty()) {
    entries.emplace_back("data/channel_mean",
                         Tensor({ds.channel_mean.size()}, ds.channel_mean));
    entries.emplace_back("data/channel_std", Tensor({ds.channel_std.size()}, ds.channel_std));
  }
  write_bytes(path, encode_container(entries));
}

Dataset load_dataset(const std::filesystem::path& path) {
  Dataset ds;
  for (auto& [name, t] : decode_container(read_bytes(path))) {
    if (name == "data/images") {
      ds.images = std::move(t);
    } else if (name == "data/labels") {
      for (float v : t.data()) ds.labels.push_back(static_cast<int>(v));
    } else if (name == "data/num_classes") {
      ds.num_classes = static_cast<std::size_t>(t.item());
    } else if (name == "data/channel_mean") {
      ds.channel_mean.assign(t.data().begin(), t.data().end());
    } else if (name == "data/channel_std") {
      ds.channel_std.assign(t.data().begin(), t.data().end());
    }
  }
  ds.validate();
  return ds;
}

}  // namespace psinet
