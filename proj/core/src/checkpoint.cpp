#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "btgat/grid_data.hpp"
#include "btgat/model.hpp"

namespace btgat {

namespace {

constexpr const char* kMagic = "BTGATCKPT1";

template <typename U>
void put_le(U v, std::string& out) {
  if constexpr (std::endian::native == std::endian::big) {
    if constexpr (sizeof(U) == 8) v = __builtin_bswap64(v);
    if constexpr (sizeof(U) == 4) v = __builtin_bswap32(v);
  }
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t pos) : bytes_(bytes), pos_(pos) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) {
      if constexpr (sizeof(U) == 8) v = __builtin_bswap64(v);
      if constexpr (sizeof(U) == 4) v = __builtin_bswap32(v);
    }
    pos_ += sizeof(U);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw DataError("checkpoint truncated", pos_);
  }
  const std::string& bytes_;
  std::size_t pos_;
};

std::uint64_t to_u64(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw DataError("checkpoint header lacks '" + key + "'");
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(it->second.data(), it->second.data() + it->second.size(), v);
  if (ec != std::errc() || ptr != it->second.data() + it->second.size())
    throw DataError("checkpoint header field '" + key + "' is not an integer");
  return v;
}

}  // namespace

std::string serialize_checkpoint(const Model& model, std::uint64_t step) {
  const auto& c = model.config();
  const auto& g = model.geometry();
  std::ostringstream h;
  h << kMagic << '\n';
  h << "channels=" << c.channels[0] << ',' << c.channels[1] << ',' << c.channels[2] << ','
    << c.channels[3] << '\n';
  h << "latent_dim=" << c.latent_dim << '\n';
  h << "knn_k=" << c.knn_k << '\n';
  h << "bilstm_hidden=" << c.bilstm_hidden << '\n';
  h << "attention_heads=" << c.attention_heads << '\n';
  h << "n_clusters=" << c.n_clusters << '\n';
  h << "alpha_bits=" << std::bit_cast<std::uint64_t>(c.alpha) << '\n';
  h << "window_length=" << c.window_length << '\n';
  h << "height=" << g.height << '\n';
  h << "width=" << g.width << '\n';
  h << "variables=" << g.channels << '\n';
  h << "seed=" << model.seed() << '\n';
  h << "step=" << step << '\n';
  h << "tensors=" << model.parameters().size() << '\n';
  h << "end_header\n";
  std::string out = h.str();
  const auto& params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& name = params.name(i);
    const auto& t = params.value(i);
    put_le<std::uint32_t>(static_cast<std::uint32_t>(name.size()), out);
    out += name;
    put_le<std::uint32_t>(static_cast<std::uint32_t>(t.rank()), out);
    for (auto e : t.shape()) put_le<std::uint64_t>(e, out);
    for (double v : t.data()) put_le<std::uint64_t>(std::bit_cast<std::uint64_t>(v), out);
  }
  return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  const std::string end_marker = "end_header\n";
  const auto end = bytes.find(end_marker);
  if (bytes.rfind(std::string(kMagic) + "\n", 0) != 0 || end == std::string::npos)
    throw DataError("not a checkpoint file (bad magic or header)", 0);
  std::map<std::string, std::string> kv;
  std::istringstream hs(bytes.substr(0, end));
  std::string line;
  std::getline(hs, line);
  while (std::getline(hs, line)) {
    auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("malformed checkpoint header line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  Checkpoint ck;
  {
    std::istringstream cs(kv["channels"]);
    std::string part;
    for (std::size_t i = 0; i < 4; ++i) {
      if (!std::getline(cs, part, ',')) throw DataError("checkpoint channels field malformed");
      ck.config.channels[i] = std::stoul(part);
    }
  }
  ck.config.latent_dim = to_u64(kv, "latent_dim");
  ck.config.knn_k = to_u64(kv, "knn_k");
  ck.config.bilstm_hidden = to_u64(kv, "bilstm_hidden");
  ck.config.attention_heads = to_u64(kv, "attention_heads");
  ck.config.n_clusters = to_u64(kv, "n_clusters");
  ck.config.alpha = std::bit_cast<double>(to_u64(kv, "alpha_bits"));
  ck.config.window_length = to_u64(kv, "window_length");
  ck.geometry.height = to_u64(kv, "height");
  ck.geometry.width = to_u64(kv, "width");
  ck.geometry.channels = to_u64(kv, "variables");
  ck.seed = to_u64(kv, "seed");
  ck.step = to_u64(kv, "step");
  const auto count = to_u64(kv, "tensors");

  Reader r(bytes, end + end_marker.size());
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>();
    std::string name = r.str(name_len);
    const auto rank = r.get<std::uint32_t>();
    if (rank == 0 || rank > kMaxRank) throw DataError("checkpoint tensor '" + name + "' has bad rank", r.pos());
    Shape shape(rank);
    for (auto& e : shape) e = r.get<std::uint64_t>();
    std::vector<double> data(shape_size(shape));
    for (auto& v : data) v = std::bit_cast<double>(r.get<std::uint64_t>());
    ck.params.add(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (r.pos() != bytes.size()) throw DataError("trailing bytes after checkpoint tensors", r.pos());
  return ck;
}

void save_checkpoint(const Model& model, std::uint64_t step, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(model, step);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return parse_checkpoint(os.str());
}

Model model_from_checkpoint(const Checkpoint& ck) {
  Model m(ck.config, ck.geometry, ck.seed);
  auto& params = m.parameters();
  if (params.size() != ck.params.size())
    throw DataError("checkpoint holds " + std::to_string(ck.params.size()) +
                    " tensors, model expects " + std::to_string(params.size()));
  for (std::size_t i = 0; i < ck.params.size(); ++i) {
    auto id = params.find(ck.params.name(i));
    if (!id) throw DataError("checkpoint tensor '" + ck.params.name(i) + "' unknown to the model");
    if (params.value(*id).shape() != ck.params.value(i).shape())
      throw DataError("checkpoint tensor '" + ck.params.name(i) + "' has shape " +
                      shape_str(ck.params.value(i).shape()) + ", model expects " +
                      shape_str(params.value(*id).shape()));
    params.value(*id) = ck.params.value(i);
  }
  return m;
}

}  // namespace btgat
