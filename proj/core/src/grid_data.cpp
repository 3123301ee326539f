#include "btgat/grid_data.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

namespace btgat {

GridDataset::GridDataset(std::size_t T_, std::size_t L_, std::size_t W_, std::size_t n_,
                         std::vector<std::string> names)
    : T(T_), L(L_), W(W_), n(n_), var_names(std::move(names)) {
  if (var_names.empty())
    for (std::size_t v = 0; v < n; ++v) var_names.push_back("v" + std::to_string(v));
  values.assign(T * L * W * n, 0.0);
  missing_mask.assign(values.size(), 0);
}

std::size_t GridDataset::missing_count() const {
  return static_cast<std::size_t>(std::count(missing_mask.begin(), missing_mask.end(), 1));
}

void GridDataset::validate() const {
  if (T == 0 || L == 0 || W == 0 || n == 0) throw DataError("grid extents must all be >= 1");
  const std::size_t total = T * L * W * n;
  if (values.size() != total || missing_mask.size() != total)
    throw DataError("grid buffers do not match extents T*L*W*n = " + std::to_string(total));
  if (var_names.size() != n)
    throw DataError("expected " + std::to_string(n) + " variable names, got " +
                    std::to_string(var_names.size()));
}

GridFormat format_from_path(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".csv" ? GridFormat::csv : GridFormat::container;
}

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::size_t parse_extent(const std::string& key, const std::string& value, std::uintmax_t offset) {
  std::size_t out = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size() || out == 0)
    throw DataError("header field " + key + "='" + value + "' is not a positive integer", offset);
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

std::string trim(std::string s) {
  auto notspace = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), notspace));
  s.erase(std::find_if(s.rbegin(), s.rend(), notspace).base(), s.end());
  return s;
}

double load_le_double(const char* p) {
  std::uint64_t bits;
  std::memcpy(&bits, p, 8);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  return std::bit_cast<double>(bits);
}

void store_le_double(double v, std::string& out) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  char buf[8];
  std::memcpy(buf, &bits, 8);
  out.append(buf, 8);
}

}  // namespace

GridDataset parse_container(const std::string& bytes) {
  const auto nl = bytes.find('\n');
  if (nl == std::string::npos) throw DataError("grid container header is not newline-terminated", 0);
  const std::string header = bytes.substr(0, nl);
  std::map<std::string, std::string> fields;
  std::size_t pos = 0;
  std::istringstream hs(header);
  std::string token;
  while (hs >> token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos || eq == 0)
      throw DataError("malformed header token '" + token + "'", header.find(token, pos));
    fields[token.substr(0, eq)] = token.substr(eq + 1);
    pos = header.find(token, pos) + token.size();
  }
  if (fields["magic"] != "STGRID1") throw DataError("missing or wrong magic (expected STGRID1)", 0);
  for (const char* key : {"T", "L", "W", "n"})
    if (!fields.count(key)) throw DataError(std::string("header lacks field ") + key, 0);
  GridDataset d;
  d.T = parse_extent("T", fields["T"], 0);
  d.L = parse_extent("L", fields["L"], 0);
  d.W = parse_extent("W", fields["W"], 0);
  d.n = parse_extent("n", fields["n"], 0);
  if (fields.count("var_names") && !fields["var_names"].empty()) {
    d.var_names = split(fields["var_names"], ',');
    if (d.var_names.size() != d.n)
      throw DataError("var_names lists " + std::to_string(d.var_names.size()) +
                          " names but n=" + std::to_string(d.n),
                      0);
  } else {
    for (std::size_t v = 0; v < d.n; ++v) d.var_names.push_back("v" + std::to_string(v));
  }
  const std::size_t count = d.T * d.L * d.W * d.n;
  const std::size_t payload = bytes.size() - nl - 1;
  if (payload != count * 8)
    throw DataError("payload holds " + std::to_string(payload) + " bytes, header declares " +
                        std::to_string(count) + " float64 values (" + std::to_string(count * 8) +
                        " bytes)",
                    nl + 1);
  d.values.resize(count);
  d.missing_mask.assign(count, 0);
  const char* p = bytes.data() + nl + 1;
  for (std::size_t i = 0; i < count; ++i) {
    d.values[i] = load_le_double(p + 8 * i);
    if (std::isnan(d.values[i])) d.missing_mask[i] = 1;
  }
  return d;
}

GridDataset parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line)) throw DataError("empty CSV", 1);
  if (trim(line) != "t,lon,lat,var,value")
    throw DataError("CSV header must be 't,lon,lat,var,value'", 1);

  struct Row {
    std::size_t t, lon, lat, var;
    std::optional<double> value;
    std::size_t line;
  };
  std::vector<Row> rows;
  std::vector<std::string> names;
  bool numeric_vars = true;
  std::vector<std::string> raw_vars;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto cells = split(line, ',');
    if (cells.size() != 5) throw DataError("expected 5 CSV columns", lineno);
    Row r{};
    r.line = lineno;
    auto idx = [&](const std::string& cell, const char* what) {
      std::size_t v = 0;
      auto c = trim(cell);
      auto [ptr, ec] = std::from_chars(c.data(), c.data() + c.size(), v);
      if (ec != std::errc() || ptr != c.data() + c.size() || c.empty())
        throw DataError(std::string("column ") + what + " is not a non-negative integer", lineno);
      return v;
    };
    r.t = idx(cells[0], "t");
    r.lon = idx(cells[1], "lon");
    r.lat = idx(cells[2], "lat");
    auto var = trim(cells[3]);
    raw_vars.push_back(var);
    if (var.empty() || !std::all_of(var.begin(), var.end(), [](unsigned char c) { return std::isdigit(c); }))
      numeric_vars = false;
    auto value = trim(cells[4]);
    if (!value.empty()) {
      try {
        std::size_t used = 0;
        r.value = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw DataError("value '" + value + "' is not a number", lineno);
      }
      if (std::isnan(*r.value)) r.value.reset();
    }
    rows.push_back(r);
  }
  if (rows.empty()) throw DataError("CSV has no data rows", lineno);

  std::size_t max_var = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (numeric_vars) {
      rows[i].var = std::stoul(raw_vars[i]);
    } else {
      auto it = std::find(names.begin(), names.end(), raw_vars[i]);
      if (it == names.end()) {
        names.push_back(raw_vars[i]);
        it = names.end() - 1;
      }
      rows[i].var = static_cast<std::size_t>(it - names.begin());
    }
    max_var = std::max(max_var, rows[i].var);
  }
  std::size_t T = 0, L = 0, W = 0;
  for (const auto& r : rows) {
    T = std::max(T, r.t + 1);
    L = std::max(L, r.lon + 1);
    W = std::max(W, r.lat + 1);
  }
  GridDataset d(T, L, W, max_var + 1, numeric_vars ? std::vector<std::string>{} : names);
  std::fill(d.values.begin(), d.values.end(), std::numeric_limits<double>::quiet_NaN());
  std::fill(d.missing_mask.begin(), d.missing_mask.end(), 1);
  std::vector<std::uint8_t> seen(d.values.size(), 0);
  for (const auto& r : rows) {
    const auto i = d.index(r.t, r.lon, r.lat, r.var);
    if (seen[i]) throw DataError("duplicate CSV entry for one grid cell", r.line);
    seen[i] = 1;
    if (r.value) {
      d.values[i] = *r.value;
      d.missing_mask[i] = 0;
    }
  }
  return d;
}

GridDataset ingest_grid(const std::filesystem::path& path, GridFormat format) {
  const auto bytes = read_file(path);
  GridDataset d = format == GridFormat::csv ? parse_csv(bytes) : parse_container(bytes);
  d.validate();
  return d;
}

std::string serialize_container(const GridDataset& d) {
  d.validate();
  std::string out = "magic=STGRID1 T=" + std::to_string(d.T) + " L=" + std::to_string(d.L) +
                    " W=" + std::to_string(d.W) + " n=" + std::to_string(d.n) + " var_names=";
  for (std::size_t v = 0; v < d.n; ++v) {
    if (v) out += ',';
    out += d.var_names[v];
  }
  out += '\n';
  out.reserve(out.size() + d.values.size() * 8);
  for (double v : d.values) store_le_double(v, out);
  return out;
}

void write_container(const GridDataset& d, const std::filesystem::path& path) {
  const auto bytes = serialize_container(d);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string serialize_csv(const GridDataset& d) {
  std::ostringstream os;
  os.precision(17);
  os << "t,lon,lat,var,value\n";
  for (std::size_t t = 0; t < d.T; ++t)
    for (std::size_t lon = 0; lon < d.L; ++lon)
      for (std::size_t lat = 0; lat < d.W; ++lat)
        for (std::size_t v = 0; v < d.n; ++v) {
          os << t << ',' << lon << ',' << lat << ',' << d.var_names[v] << ',';
          const double x = d.at(t, lon, lat, v);
          if (!std::isnan(x)) os << x;
          os << '\n';
        }
  return os.str();
}

GridDataset impute_mean(GridDataset d) {
  double sum = 0.0;
  std::size_t observed = 0;
  for (std::size_t i = 0; i < d.values.size(); ++i) {
    if (d.missing_mask[i]) continue;
    sum += d.values[i];
    ++observed;
  }
  if (observed == 0) throw DataError("cannot impute: every cell is missing");
  const double mean = sum / static_cast<double>(observed);
  for (std::size_t i = 0; i < d.values.size(); ++i)
    if (d.missing_mask[i]) d.values[i] = mean;
  return d;
}

GridDataset minmax_normalize(GridDataset d) {
  for (double v : d.values)
    if (std::isnan(v)) throw DataError("minmax_normalize requires imputed data (NaN present)");
  std::vector<std::pair<double, double>> ranges(
      d.n, {std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()});
  for (std::size_t i = 0; i < d.values.size(); ++i) {
    auto& [lo, hi] = ranges[i % d.n];
    lo = std::min(lo, d.values[i]);
    hi = std::max(hi, d.values[i]);
  }
  for (std::size_t i = 0; i < d.values.size(); ++i) {
    const auto [lo, hi] = ranges[i % d.n];
    d.values[i] = hi > lo ? (d.values[i] - lo) / (hi - lo) : 0.0;
  }
  d.normalization = std::move(ranges);
  return d;
}

Tensor flatten_2d(const GridDataset& d) {
  d.validate();
  return Tensor({d.T, d.frame_size()}, d.values);
}

GridDataset unflatten_2d(const Tensor& matrix, std::size_t L, std::size_t W, std::size_t n,
                         std::vector<std::string> var_names) {
  if (matrix.rank() != 2 || matrix.dim(1) != L * W * n)
    throw ShapeError("unflatten_2d: expected (T, " + std::to_string(L * W * n) + ") matrix, got " +
                     shape_str(matrix.shape()));
  GridDataset d(matrix.dim(0), L, W, n, std::move(var_names));
  d.values = matrix.storage();
  return d;
}

std::optional<std::size_t> SequenceTensor::source_index(std::size_t b, std::size_t step) const {
  if (b >= windows() || step >= window_length || !frame_valid[b * window_length + step])
    return std::nullopt;
  return window_starts[b] + step;
}

SequenceTensor to_sequence_tensor(const GridDataset& d, std::size_t window_length) {
  d.validate();
  if (window_length < 2) throw std::invalid_argument("window_length must be >= 2");
  if (window_length > d.T)
    throw std::invalid_argument("window_length " + std::to_string(window_length) +
                                " exceeds T=" + std::to_string(d.T));
  const std::size_t B = (d.T + window_length - 1) / window_length;
  SequenceTensor s;
  s.window_length = window_length;
  s.source_frames = d.T;
  s.tensor = Tensor({B, window_length, d.L, d.W, d.n}, 0.0);
  s.frame_valid.assign(B * window_length, 0);
  const std::size_t frame = d.frame_size();
  for (std::size_t b = 0; b < B; ++b) {
    s.window_starts.push_back(b * window_length);
    for (std::size_t k = 0; k < window_length; ++k) {
      const std::size_t t = b * window_length + k;
      if (t >= d.T) continue;
      s.frame_valid[b * window_length + k] = 1;
      std::copy_n(&d.values[t * frame], frame, &s.tensor[(b * window_length + k) * frame]);
    }
  }
  return s;
}

}  // namespace btgat
