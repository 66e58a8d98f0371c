#include "satloc/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "satloc/errors.hpp"

namespace satloc {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

constexpr char kMagic[8] = {'S', 'L', 'C', 'K', 'P', 'T', '1', '\0'};

class Writer {
 public:
  template <class V>
  void pod(V v) {
    out_.append(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void str(std::string_view s) {
    pod(static_cast<std::uint64_t>(s.size()));
    out_.append(s);
  }
  void floats(const std::vector<float>& v) {
    pod(static_cast<std::uint64_t>(v.size()));
    out_.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float));
  }
  void raw(const char* p, std::size_t n) { out_.append(p, n); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(std::string_view in, const std::string& origin) : in_(in), origin_(origin) {}
  template <class V>
  V pod() {
    V v;
    std::memcpy(&v, need(sizeof v), sizeof v);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    return std::string(need(n), n);
  }
  std::vector<float> floats() {
    const auto n = pod<std::uint64_t>();
    if (n > in_.size() / sizeof(float)) fail("truncated float block");
    std::vector<float> v(n);
    std::memcpy(v.data(), need(n * sizeof(float)), n * sizeof(float));
    return v;
  }
  const char* need(std::size_t n) {
    if (n > in_.size() - pos_) fail("truncated at byte " + std::to_string(pos_));
    const char* p = in_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == in_.size(); }
  [[noreturn]] void fail(const std::string& what) const { throw FormatError(origin_ + ": " + what); }

 private:
  std::string_view in_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const Checkpoint& c) {
  const std::size_t n = c.names.size();
  if (c.shapes.size() != n || c.values.size() != n)
    throw ContractError("encode_checkpoint: ragged parameter lists");
  const bool moments = !c.first_moment.empty();
  if (moments && (c.first_moment.size() != n || c.second_moment.size() != n))
    throw ContractError("encode_checkpoint: moments do not match parameters");
  Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.str(c.config_text);
  w.pod(c.config_hash);
  w.pod(c.step);
  w.pod(static_cast<std::uint64_t>(n));
  w.pod(static_cast<std::uint8_t>(moments));
  for (std::size_t i = 0; i < n; ++i) {
    w.str(c.names[i]);
    w.pod(static_cast<std::uint32_t>(c.shapes[i].size()));
    for (auto d : c.shapes[i]) w.pod(static_cast<std::uint64_t>(d));
    w.floats(c.values[i]);
    if (moments) {
      w.floats(c.first_moment[i]);
      w.floats(c.second_moment[i]);
    }
  }
  return w.take();
}

Checkpoint decode_checkpoint(std::string_view bytes, const std::string& origin) {
  Reader r(bytes, origin);
  if (bytes.size() < sizeof kMagic || std::memcmp(r.need(sizeof kMagic), kMagic, sizeof kMagic) != 0)
    r.fail("not a checkpoint (bad magic)");
  Checkpoint c;
  c.config_text = r.str();
  c.config_hash = r.pod<std::uint64_t>();
  c.step = r.pod<std::uint64_t>();
  const auto n = r.pod<std::uint64_t>();
  const bool moments = r.pod<std::uint8_t>() != 0;
  for (std::uint64_t i = 0; i < n; ++i) {
    c.names.push_back(r.str());
    const auto rank = r.pod<std::uint32_t>();
    Shape s;
    for (std::uint32_t k = 0; k < rank; ++k) s.push_back(static_cast<std::size_t>(r.pod<std::uint64_t>()));
    c.shapes.push_back(s);
    c.values.push_back(r.floats());
    if (c.values.back().size() != shape_numel(s)) r.fail("parameter " + c.names.back() + " has wrong size");
    if (moments) {
      c.first_moment.push_back(r.floats());
      c.second_moment.push_back(r.floats());
      if (c.first_moment.back().size() != c.values.back().size() ||
          c.second_moment.back().size() != c.values.back().size())
        r.fail("moments of " + c.names.back() + " have wrong size");
    }
  }
  if (!r.done()) r.fail("trailing bytes");
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::string bytes = encode_checkpoint(ckpt);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write checkpoint " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to checkpoint " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw FormatError("cannot move checkpoint into " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str(), path.string());
}

std::optional<std::string> hash_mismatch(const Checkpoint& ckpt, std::uint64_t expected_hash) {
  if (ckpt.config_hash == expected_hash) return std::nullopt;
  std::ostringstream os;
  os << std::hex << "checkpoint config hash " << ckpt.config_hash << " differs from current " << expected_hash
     << "; parameters are matched by name and shape";
  return os.str();
}

template <std::floating_point T>
Checkpoint capture_checkpoint(const ParamStore<T>& params, const OptimizerState<T>* optim) {
  Checkpoint c;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = params.tensors()[i];
    c.names.push_back(params.names()[i]);
    c.shapes.push_back(t.shape());
    c.values.emplace_back(t.data().begin(), t.data().end());
    if (optim) {
      c.first_moment.emplace_back(optim->first_moment[i].begin(), optim->first_moment[i].end());
      c.second_moment.emplace_back(optim->second_moment[i].begin(), optim->second_moment[i].end());
    }
  }
  if (optim) c.step = optim->step;
  return c;
}

template <std::floating_point T>
std::size_t restore_parameters(ParamStore<T>& params, const Checkpoint& ckpt, bool strict) {
  if (strict && ckpt.names.size() != params.size())
    throw FormatError("checkpoint holds " + std::to_string(ckpt.names.size()) + " parameters, model has " +
                      std::to_string(params.size()));
  std::size_t copied = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& name = params.names()[i];
    auto& t = params.tensors()[i];
    std::size_t j = 0;
    while (j < ckpt.names.size() && ckpt.names[j] != name) ++j;
    const bool ok = j < ckpt.names.size() && ckpt.shapes[j] == t.shape();
    if (!ok) {
      if (strict) throw FormatError("checkpoint lacks a matching parameter " + name);
      continue;
    }
    auto dst = t.mutable_data();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(ckpt.values[j][k]);
    ++copied;
  }
  return copied;
}

template <std::floating_point T>
void restore_optimizer(OptimizerState<T>& optim, const Checkpoint& ckpt) {
  if (ckpt.first_moment.size() != optim.first_moment.size())
    throw FormatError("checkpoint has no optimizer state for this model");
  for (std::size_t i = 0; i < optim.first_moment.size(); ++i) {
    if (ckpt.first_moment[i].size() != optim.first_moment[i].size())
      throw FormatError("optimizer moment size mismatch for " + ckpt.names[i]);
    std::copy(ckpt.first_moment[i].begin(), ckpt.first_moment[i].end(), optim.first_moment[i].begin());
    std::copy(ckpt.second_moment[i].begin(), ckpt.second_moment[i].end(), optim.second_moment[i].begin());
  }
  optim.step = ckpt.step;
}

template Checkpoint capture_checkpoint<float>(const ParamStore<float>&, const OptimizerState<float>*);
template Checkpoint capture_checkpoint<double>(const ParamStore<double>&, const OptimizerState<double>*);
template std::size_t restore_parameters<float>(ParamStore<float>&, const Checkpoint&, bool);
template std::size_t restore_parameters<double>(ParamStore<double>&, const Checkpoint&, bool);
template void restore_optimizer<float>(OptimizerState<float>&, const Checkpoint&);
template void restore_optimizer<double>(OptimizerState<double>&, const Checkpoint&);

}  // namespace satloc
