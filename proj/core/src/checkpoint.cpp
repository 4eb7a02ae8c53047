#include "rawformer/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "rawformer/errors.hpp"
#include "rawformer/imgio.hpp"

namespace rawformer {

void Checkpoint::put(const std::string& prefix, const nn::ParamSet<float>& params) {
  for (const auto& [name, p] : params) tensors[prefix + name] = p.value;
}

void Checkpoint::get(const std::string& prefix, nn::ParamSet<float>& params) const {
  for (auto& [name, p] : params) {
    auto it = tensors.find(prefix + name);
    if (it == tensors.end()) throw CheckpointError("checkpoint lacks tensor '" + prefix + name + "'");
    if (it->second.shape() != p.value.shape())
      throw CheckpointError("checkpoint tensor '" + prefix + name + "' has shape " + nn::to_string(it->second.shape()) +
                            ", model expects " + nn::to_string(p.value.shape()));
    p.value = it->second;
  }
}

bool Checkpoint::has_prefix(const std::string& prefix) const {
  auto it = tensors.lower_bound(prefix);
  return it != tensors.end() && it->first.starts_with(prefix);
}

const nn::Tensor<float>& Checkpoint::tensor(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw CheckpointError("checkpoint lacks tensor '" + name + "'");
  return it->second;
}

const std::string& Checkpoint::value(const std::string& key) const {
  auto it = meta.find(key);
  if (it == meta.end()) throw CheckpointError("checkpoint lacks metadata key '" + key + "'");
  return it->second;
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}
void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

class Reader {
 public:
  explicit Reader(const std::string& b) : bytes_(b) {}
  std::uint64_t pos() const { return pos_; }
  void need(std::uint64_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("checkpoint: truncated ") + what, bytes_.size());
  }
  std::uint64_t uint(int width, const char* what) {
    need(width, what);
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += width;
    return v;
  }
  std::string_view take(std::uint64_t n, const char* what) {
    need(n, what);
    std::string_view v(bytes_.data() + pos_, n);
    pos_ += n;
    return v;
  }

 private:
  const std::string& bytes_;
  std::uint64_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out = "RFCK";
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  std::string meta_text;
  for (const auto& [name, t] : ckpt.tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    const std::string blob = encode_rawimg(t);
    put_u64(out, blob.size());
    out += blob;
    const nn::Shape& s = t.shape();
    meta_text += "shape." + name + "=" + std::to_string(s.n) + " " + std::to_string(s.c) + " " + std::to_string(s.h) +
                 " " + std::to_string(s.w) + "\n";
  }
  for (const auto& [k, v] : ckpt.meta) {
    if (k.find('=') != std::string::npos || k.find('\n') != std::string::npos || v.find('\n') != std::string::npos)
      throw CheckpointError("checkpoint metadata '" + k + "' contains a reserved character");
    meta_text += k + "=" + v + "\n";
  }
  put_u32(out, static_cast<std::uint32_t>(meta_text.size()));
  out += meta_text;
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.take(4, "magic") != "RFCK") throw FormatError("checkpoint: bad magic", 0);
  const auto version = r.uint(4, "header");
  if (version != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version), 4);
  const auto count = r.uint(4, "header");
  Checkpoint ckpt;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.uint(4, "tensor name");
    const std::string name(r.take(name_len, "tensor name"));
    const auto blob_len = r.uint(8, "tensor length");
    const std::uint64_t blob_at = r.pos();
    ckpt.tensors[name] = decode_rawimg(r.take(blob_len, "tensor payload"), blob_at);
  }
  const auto meta_len = r.uint(4, "metadata length");
  const std::uint64_t meta_at = r.pos();
  const std::string text(r.take(meta_len, "metadata"));
  if (r.pos() != bytes.size()) throw FormatError("checkpoint: trailing bytes", r.pos());
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint: malformed metadata line", meta_at);
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key.starts_with("shape.")) {
      const std::string name = key.substr(6);
      auto it = ckpt.tensors.find(name);
      if (it == ckpt.tensors.end()) throw FormatError("checkpoint: shape for unknown tensor '" + name + "'", meta_at);
      nn::Shape s;
      std::istringstream vs(value);
      if (!(vs >> s.n >> s.c >> s.h >> s.w) || s.numel() != it->second.size())
        throw FormatError("checkpoint: bad shape for tensor '" + name + "'", meta_at);
      it->second = std::move(it->second).reshaped(s);
    } else {
      ckpt.meta[key] = value;
    }
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(ckpt);
  // Write-then-rename so an interrupted save never leaves a torn file.
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write checkpoint " + tmp);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("checkpoint write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  try {
    return decode_checkpoint(ss.str());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

}  // namespace rawformer
