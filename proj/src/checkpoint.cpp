#include "ccmr/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "ccmr/errors.hpp"

namespace ccmr {

namespace {

constexpr char kMagic[8] = {'C', 'C', 'M', 'R', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::ostream& out, T value) {
  using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.put(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}

  template <typename T>
  T get() {
    using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>;
    unsigned char bytes[sizeof(T)];
    read(bytes, sizeof(T));
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<U>(static_cast<U>(bytes[i]) << (8 * i));
    return std::bit_cast<T>(bits);
  }

  std::string string(std::uint64_t n) {
    if (n > (std::uint64_t{1} << 30)) throw FormatError(path_ + ": implausible string length");
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }

  void read(void* dst, std::size_t n) {
    if (!in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n))) {
      throw FormatError(path_ + ": truncated checkpoint");
    }
  }

  const std::string& path() const { return path_; }

 private:
  std::istream& in_;
  std::string path_;
};

void put_tensor_values(std::ostream& out, const Tensor<double>& t) {
  for (Eigen::Index i = 0; i < t.mat().size(); ++i) put(out, t.mat().data()[i]);
}

Tensor<double> get_tensor_values(Reader& r, int c, int h, int w) {
  if (c < 0 || h < 0 || w < 0 || static_cast<std::int64_t>(c) * h * w > (std::int64_t{1} << 31)) {
    throw FormatError(r.path() + ": implausible tensor shape");
  }
  Tensor<double> t(c, h, w);
  for (Eigen::Index i = 0; i < t.mat().size(); ++i) t.mat().data()[i] = r.get<double>();
  return t;
}

}  // namespace

Checkpoint capture(const CcmrModel<float>& model, std::int64_t step, Adam<float>* optimizer, const nlohmann::json& meta) {
  Checkpoint ckpt;
  ckpt.config = model.config();
  ckpt.meta = meta;
  ckpt.step = step;
  for (const auto& p : model.parameters().entries()) ckpt.params.emplace_back(p.name, p.var.value().cast<double>());
  if (optimizer) {
    ckpt.has_optimizer = true;
    ckpt.optimizer_steps = optimizer->steps();
    for (const auto& m : optimizer->first_moments()) ckpt.first_moments.push_back(m.cast<double>());
    for (const auto& v : optimizer->second_moments()) ckpt.second_moments.push_back(v.cast<double>());
  }
  return ckpt;
}

void restore(const Checkpoint& ckpt, CcmrModel<float>& model, Adam<float>* optimizer) {
  const auto& entries = model.parameters().entries();
  if (entries.size() != ckpt.params.size()) {
    throw FormatError("checkpoint has " + std::to_string(ckpt.params.size()) + " parameters, model expects " +
                      std::to_string(entries.size()));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& [name, value] = ckpt.params[i];
    const Tensor<float>& current = entries[i].var.value();
    if (name != entries[i].name || value.channels() != current.channels() || value.height() != current.height() ||
        value.width() != current.width()) {
      throw FormatError("checkpoint parameter " + name + " " + value.shape_string() + " does not match model " +
                        entries[i].name + " " + current.shape_string());
    }
    Var<float> var = entries[i].var;
    var.mutable_value() = value.cast<float>();
  }
  if (optimizer && ckpt.has_optimizer) {
    auto& m = optimizer->first_moments();
    auto& v = optimizer->second_moments();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      m[i] = ckpt.first_moments[i].cast<float>();
      v[i] = ckpt.second_moments[i].cast<float>();
    }
    optimizer->set_steps(ckpt.optimizer_steps);
  }
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path + ": cannot open for writing");
  out.write(kMagic, sizeof kMagic);
  put(out, Checkpoint::kVersion);
  const std::string header = nlohmann::json{{"model", ckpt.config}, {"meta", ckpt.meta}}.dump();
  put(out, static_cast<std::uint64_t>(header.size()));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  put(out, ckpt.step);
  put(out, static_cast<std::uint64_t>(ckpt.params.size()));
  for (const auto& [name, value] : ckpt.params) {
    put(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put(out, static_cast<std::int32_t>(value.channels()));
    put(out, static_cast<std::int32_t>(value.height()));
    put(out, static_cast<std::int32_t>(value.width()));
    put_tensor_values(out, value);
  }
  put(out, static_cast<std::uint8_t>(ckpt.has_optimizer));
  if (ckpt.has_optimizer) {
    put(out, ckpt.optimizer_steps);
    for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
      put_tensor_values(out, ckpt.first_moments.at(i));
      put_tensor_values(out, ckpt.second_moments.at(i));
    }
  }
  if (!out) throw FormatError(path + ": write failed");
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path + ": cannot open");
  Reader r(in, path);
  char magic[8];
  r.read(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw FormatError(path + ": not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != Checkpoint::kVersion) {
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  try {
    const auto header = nlohmann::json::parse(r.string(r.get<std::uint64_t>()));
    ckpt.config = header.at("model").get<ModelConfig>();
    ckpt.meta = header.value("meta", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": bad header: " + e.what());
  }
  ckpt.step = r.get<std::int64_t>();
  const auto count = r.get<std::uint64_t>();
  if (count > 100000) throw FormatError(path + ": implausible parameter count");
  std::vector<std::array<int, 3>> shapes;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.string(r.get<std::uint32_t>());
    const int c = r.get<std::int32_t>(), h = r.get<std::int32_t>(), w = r.get<std::int32_t>();
    ckpt.params.emplace_back(std::move(name), get_tensor_values(r, c, h, w));
    shapes.push_back({c, h, w});
  }
  ckpt.has_optimizer = r.get<std::uint8_t>() != 0;
  if (ckpt.has_optimizer) {
    ckpt.optimizer_steps = r.get<std::int64_t>();
    for (const auto& s : shapes) {
      ckpt.first_moments.push_back(get_tensor_values(r, s[0], s[1], s[2]));
      ckpt.second_moments.push_back(get_tensor_values(r, s[0], s[1], s[2]));
    }
  }
  return ckpt;
}

}  // namespace ccmr
