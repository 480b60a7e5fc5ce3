// SPDX-License-Identifier: Apache-2.0
#include "ted/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "ted/errors.hpp"

namespace ted {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<std::uint8_t, sizeof(U)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<U>(bytes);
  }
  return v;
}

class Writer {
 public:
  template <typename U>
  void put(U v) {
    v = to_little(v);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out_.insert(out_.end(), p, p + sizeof(U));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out_.insert(out_.end(), p, p + n);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  template <typename U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, in_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return to_little(v);
  }
  std::span<const std::uint8_t> get_bytes(std::size_t n) {
    need(n);
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw ArtifactError("checkpoint truncated");
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::F32:
      return 4;
    case DType::F64:
      return 8;
  }
  throw ArtifactError("unknown dtype tag");
}

}  // namespace

std::string canonical_kv(const Metadata& meta) {
  std::string out;
  for (const auto& [k, v] : meta) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw ValidationError("metadata entry '" + k + "' is not representable");
    }
    out += k;
    out += '=';
    out += v;
    out += '\n';
  }
  return out;
}

Metadata parse_kv(const std::string& text) {
  Metadata meta;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ArtifactError("malformed metadata line: " + line);
    meta[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return meta;
}

template <typename T>
void Checkpoint::put(const std::string& name, const Tensor<T>& tensor) {
  Blob b;
  b.name = name;
  b.dtype = dtype_of<T>();
  b.shape = tensor.shape();
  auto vals = tensor.values();
  b.bytes.resize(vals.size() * sizeof(T));
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const T v = to_little(vals[i]);
    std::memcpy(b.bytes.data() + i * sizeof(T), &v, sizeof(T));
  }
  if (auto it = index_.find(name); it != index_.end()) {
    blobs_[it->second] = std::move(b);
  } else {
    index_[name] = blobs_.size();
    blobs_.push_back(std::move(b));
  }
}

template <typename T>
Tensor<T> Checkpoint::get(const std::string& name, bool requires_grad) const {
  const Blob& b = blob(name);
  if (b.dtype != dtype_of<T>()) throw ArtifactError("blob '" + name + "' has a different dtype");
  std::vector<T> vals(shape_numel(b.shape));
  if (vals.size() * sizeof(T) != b.bytes.size()) throw ArtifactError("blob '" + name + "' size mismatch");
  for (std::size_t i = 0; i < vals.size(); ++i) {
    T v;
    std::memcpy(&v, b.bytes.data() + i * sizeof(T), sizeof(T));
    vals[i] = to_little(v);
  }
  return Tensor<T>(b.shape, std::move(vals), requires_grad);
}

template <typename T>
void Checkpoint::load_into(const std::string& name, Tensor<T>& target) const {
  const Tensor<T> src = get<T>(name);
  if (src.shape() != target.shape()) {
    throw ArtifactError("blob '" + name + "' has shape " + shape_str(src.shape()) + ", expected " +
                        shape_str(target.shape()));
  }
  auto dst = target.mutable_values();
  std::copy(src.values().begin(), src.values().end(), dst.begin());
}

bool Checkpoint::contains(const std::string& name) const {
  return index_.count(name) != 0;
}

const Blob& Checkpoint::blob(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ArtifactError("checkpoint has no blob '" + name + "'");
  return blobs_[it->second];
}

std::vector<std::string> Checkpoint::names() const {
  std::vector<std::string> out;
  out.reserve(blobs_.size());
  for (const auto& b : blobs_) out.push_back(b.name);
  return out;
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
  Writer w;
  w.put_bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.put<std::uint32_t>(kCheckpointVersion);
  const std::string text = canonical_kv(meta);
  w.put<std::uint64_t>(text.size());
  w.put_bytes(text.data(), text.size());
  w.put<std::uint64_t>(blobs_.size());
  for (const Blob& b : blobs_) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(b.name.size()));
    w.put_bytes(b.name.data(), b.name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(b.dtype));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(b.shape.size()));
    for (std::size_t d : b.shape) w.put<std::uint64_t>(d);
    w.put<std::uint64_t>(b.bytes.size());
    w.put_bytes(b.bytes.data(), b.bytes.size());
  }
  return w.take();
}

Checkpoint Checkpoint::deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.get_bytes(sizeof(kCheckpointMagic));
  if (!std::equal(magic.begin(), magic.end(), reinterpret_cast<const std::uint8_t*>(kCheckpointMagic))) {
    throw ArtifactError("not a checkpoint (bad magic)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw ArtifactError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  const auto text_len = r.get<std::uint64_t>();
  auto text = r.get_bytes(text_len);
  ck.meta = parse_kv(std::string(text.begin(), text.end()));
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    Blob b;
    auto name = r.get_bytes(r.get<std::uint32_t>());
    b.name.assign(name.begin(), name.end());
    b.dtype = static_cast<DType>(r.get<std::uint8_t>());
    const std::size_t esize = dtype_size(b.dtype);
    const auto rank = r.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < rank; ++k) b.shape.push_back(r.get<std::uint64_t>());
    const auto nbytes = r.get<std::uint64_t>();
    if (nbytes != shape_numel(b.shape) * esize) throw ArtifactError("blob '" + b.name + "' size mismatch");
    auto data = r.get_bytes(nbytes);
    b.bytes.assign(data.begin(), data.end());
    if (ck.index_.count(b.name)) throw ArtifactError("duplicate blob '" + b.name + "'");
    ck.index_[b.name] = ck.blobs_.size();
    ck.blobs_.push_back(std::move(b));
  }
  if (!r.done()) throw ArtifactError("trailing bytes after checkpoint");
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArtifactError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ArtifactError("short write to " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

template void Checkpoint::put<float>(const std::string&, const Tensor<float>&);
template void Checkpoint::put<double>(const std::string&, const Tensor<double>&);
template Tensor<float> Checkpoint::get<float>(const std::string&, bool) const;
template Tensor<double> Checkpoint::get<double>(const std::string&, bool) const;
template void Checkpoint::load_into<float>(const std::string&, Tensor<float>&) const;
template void Checkpoint::load_into<double>(const std::string&, Tensor<double>&) const;

}  // namespace ted
