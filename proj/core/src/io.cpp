#include "tense/io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>

#include "tense/graph.hpp"

namespace tense {

namespace {

constexpr std::uint32_t kTensorVersion = 1;
constexpr std::uint32_t kDtypeF32 = 0;

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
void put_be(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = sizeof(U); i-- > 0;) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}

  template <typename U>
  U le(const char* field) {
    if (bytes_.size() - pos_ < sizeof(U)) throw FormatError(field, "file truncated");
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::uint8_t to_byte(float v, std::size_t& clamped) {
  if (!(v >= 0.0f && v <= 1.0f)) {
    ++clamped;
    v = std::isnan(v) ? 0.0f : std::clamp(v, 0.0f, 1.0f);
  }
  return static_cast<std::uint8_t>(std::lround(v * 255.0f));
}

void check_image(const Tensor& image) {
  if (image.rank() != 3 || (image.dim(0) != 3 && image.dim(0) != 4))
    throw ShapeError("image must be [3|4, H, W], got " + shape_str(image.shape()));
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

std::string hex_color(const Rgba& c) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", static_cast<int>(std::lround(c.r * 255)),
                static_cast<int>(std::lround(c.g * 255)), static_cast<int>(std::lround(c.b * 255)));
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

/// Roughly 5 round tick values covering [lo, hi].
std::vector<double> ticks(double lo, double hi) {
  const double span = hi - lo;
  if (span <= 0) return {lo};
  const double raw = span / 5;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 5.0, 10.0})
    if (m * mag >= raw) {
      step = m * mag;
      break;
    }
  std::vector<double> out;
  for (double t = std::ceil(lo / step) * step; t <= hi + 1e-9 * span; t += step)
    out.push_back(std::abs(t) < 1e-12 * step ? 0.0 : t);
  return out;
}

}  // namespace

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  for (float v : t.data())
    if (!std::isfinite(v)) throw InvalidArgument("refusing to write non-finite tensor values");
  std::vector<std::uint8_t> out;
  out.reserve(16 + 8 * t.rank() + 4 * t.size());
  out.insert(out.end(), {'T', 'N', 'S', 'R'});
  put_le<std::uint32_t>(out, kTensorVersion);
  put_le<std::uint32_t>(out, kDtypeF32);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_le<std::uint64_t>(out, d);
  for (float v : t.data()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "TNSR", 4) != 0)
    throw FormatError("magic", "not a TNSR file");
  Reader r(bytes.subspan(4));
  if (auto v = r.le<std::uint32_t>("version"); v != kTensorVersion)
    throw FormatError("version", "unsupported version " + std::to_string(v));
  if (auto d = r.le<std::uint32_t>("dtype"); d != kDtypeF32)
    throw FormatError("dtype", "unsupported dtype code " + std::to_string(d));
  const auto ndim = r.le<std::uint32_t>("ndim");
  if (ndim > 16) throw FormatError("ndim", "rank " + std::to_string(ndim) + " too large");
  Shape shape(ndim);
  std::uint64_t count = 1;
  for (auto& d : shape) {
    d = r.le<std::uint64_t>("dims");
    if (d != 0 && count > (std::uint64_t{1} << 40) / d) throw FormatError("dims", "tensor too large");
    count *= d;
  }
  if (r.remaining() != count * 4)
    throw FormatError("payload", "expected " + std::to_string(count * 4) + " bytes, found " +
                                     std::to_string(r.remaining()));
  std::vector<float> data(count);
  for (auto& v : data) v = std::bit_cast<float>(r.le<std::uint32_t>("payload"));
  return Tensor(std::move(shape), std::move(data));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  write_file(path, encode_tensor(t));
}

Tensor read_tensor(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return decode_tensor(bytes);
  } catch (const FormatError& e) {
    throw FormatError(e.field(), path.string() + ": " + std::string(e.what()).substr(e.field().size() + 2));
  }
}

Rgba pm_color(double p, double n) {
  p = std::clamp(std::isnan(p) ? 0.0 : p, 0.0, 1.0);
  n = std::clamp(std::isnan(n) ? 0.0 : n, 0.0, 1.0);
  const double m = std::min(p, n), e = p - m, i = n - m;
  const double intensity = std::max(p, n);
  const double peak = std::max({e, m, i});
  const double k = peak > 0 ? intensity / peak : 0.0;
  return {static_cast<float>(e * k), static_cast<float>(m * k), static_cast<float>(i * k),
          static_cast<float>(intensity)};
}

Tensor colorize_pm_map(const Tensor& phi_plus, const Tensor& phi_minus, double scale,
                       std::size_t out_rows, std::size_t out_cols) {
  if (phi_plus.shape() != phi_minus.shape() || phi_plus.rank() != 2)
    throw ShapeError("phi maps must share a 2-D shape");
  if (!(scale > 0)) throw InvalidArgument("map scale must be positive");
  Tensor p = phi_plus, n = phi_minus;
  if (out_rows && out_cols) {
    const Shape s{1, phi_plus.dim(0), phi_plus.dim(1)};
    p = resize_bilinear(phi_plus.reshaped(s), out_rows, out_cols).reshaped({out_rows, out_cols});
    n = resize_bilinear(phi_minus.reshaped(s), out_rows, out_cols).reshaped({out_rows, out_cols});
  }
  const std::size_t hw = p.size();
  Tensor out(Shape{4, p.dim(0), p.dim(1)});
  for (std::size_t k = 0; k < hw; ++k) {
    const Rgba c = pm_color(p[k] / scale, n[k] / scale);
    out[k] = c.r;
    out[hw + k] = c.g;
    out[2 * hw + k] = c.b;
    out[3 * hw + k] = c.a;
  }
  return out;
}

Tensor composite(const Tensor& rgb, const Tensor& rgba) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3 || rgba.rank() != 3 || rgba.dim(0) != 4 ||
      rgb.dim(1) != rgba.dim(1) || rgb.dim(2) != rgba.dim(2))
    throw ShapeError("composite needs [3,H,W] and [4,H,W] of equal size");
  const std::size_t hw = rgb.dim(1) * rgb.dim(2);
  Tensor out(rgb.shape());
  for (std::size_t k = 0; k < hw; ++k) {
    const float a = rgba[3 * hw + k];
    for (std::size_t c = 0; c < 3; ++c)
      out[c * hw + k] = rgba[c * hw + k] * a + rgb[c * hw + k] * (1 - a);
  }
  return out;
}

Rgba diverging_color(double value, double max_abs) {
  const double t = max_abs > 0 ? std::clamp(value / max_abs, -1.0, 1.0) : 0.0;
  if (t >= 0) return {1.0f, static_cast<float>(1 - t), static_cast<float>(1 - t), 1.0f};
  return {static_cast<float>(1 + t), static_cast<float>(1 + t), 1.0f, 1.0f};
}

std::vector<std::uint8_t> encode_ppm(const Tensor& image, std::size_t* clamped) {
  check_image(image);
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2), hw = H * W;
  std::string header = "P6\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  std::size_t n = 0;
  for (std::size_t k = 0; k < hw; ++k) {
    const float a = C == 4 ? std::clamp(image[3 * hw + k], 0.0f, 1.0f) : 1.0f;
    for (std::size_t c = 0; c < 3; ++c) {
      float v = image[c * hw + k];
      if (C == 4) v = std::clamp(v, 0.0f, 1.0f) * a + (1 - a);  // over white
      out.push_back(to_byte(v, n));
    }
  }
  if (clamped) *clamped = n;
  return out;
}

std::uint32_t crc32(std::span<const std::uint8_t> bytes, std::uint32_t crc) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  crc = ~crc;
  for (auto b : bytes) crc = table[(crc ^ b) & 0xFF] ^ (crc >> 8);
  return ~crc;
}

std::uint32_t adler32(std::span<const std::uint8_t> bytes) {
  std::uint32_t a = 1, b = 0;
  for (auto v : bytes) {
    a = (a + v) % 65521;
    b = (b + a) % 65521;
  }
  return (b << 16) | a;
}

std::vector<std::uint8_t> encode_png(const Tensor& image, std::size_t* clamped) {
  check_image(image);
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2), hw = H * W;
  std::size_t n = 0;
  std::vector<std::uint8_t> raw;
  raw.reserve(H * (1 + 4 * W));
  for (std::size_t r = 0; r < H; ++r) {
    raw.push_back(0);  // filter: none
    for (std::size_t c = 0; c < W; ++c) {
      const std::size_t k = r * W + c;
      for (std::size_t ch = 0; ch < 3; ++ch) raw.push_back(to_byte(image[ch * hw + k], n));
      raw.push_back(C == 4 ? to_byte(image[3 * hw + k], n) : 255);
    }
  }
  if (clamped) *clamped = n;

  std::vector<std::uint8_t> z{0x78, 0x01};
  std::size_t pos = 0;
  do {
    const std::size_t len = std::min<std::size_t>(65535, raw.size() - pos);
    const bool last = pos + len == raw.size();
    z.push_back(last ? 1 : 0);
    put_le<std::uint16_t>(z, static_cast<std::uint16_t>(len));
    put_le<std::uint16_t>(z, static_cast<std::uint16_t>(~len));
    z.insert(z.end(), raw.begin() + static_cast<std::ptrdiff_t>(pos),
             raw.begin() + static_cast<std::ptrdiff_t>(pos + len));
    pos += len;
  } while (pos < raw.size());
  put_be<std::uint32_t>(z, adler32(raw));

  std::vector<std::uint8_t> out{0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
  auto chunk = [&](const char* type, const std::vector<std::uint8_t>& data) {
    put_be<std::uint32_t>(out, static_cast<std::uint32_t>(data.size()));
    const std::size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    put_be<std::uint32_t>(out, crc32(std::span(out).subspan(start)));
  };
  std::vector<std::uint8_t> ihdr;
  put_be<std::uint32_t>(ihdr, static_cast<std::uint32_t>(W));
  put_be<std::uint32_t>(ihdr, static_cast<std::uint32_t>(H));
  ihdr.insert(ihdr.end(), {8, 6, 0, 0, 0});  // 8-bit RGBA, deflate, no filter, no interlace
  chunk("IHDR", ihdr);
  chunk("IDAT", z);
  chunk("IEND", {});
  return out;
}

ImageFormat image_format_for(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".png") return ImageFormat::Png;
  if (ext == ".ppm") return ImageFormat::Ppm;
  throw InvalidArgument("unknown image extension '" + ext + "'");
}

void write_image(const std::filesystem::path& path, const Tensor& image, ImageFormat format) {
  std::size_t clamped = 0;
  auto bytes = format == ImageFormat::Png ? encode_png(image, &clamped) : encode_ppm(image, &clamped);
  if (clamped) std::cerr << "warning: " << path.string() << ": clamped " << clamped << " values\n";
  write_file(path, bytes);
}

std::string svg_scatter(const std::vector<ScatterPoint>& points, const ScatterOptions& o) {
  if (points.empty()) throw InvalidArgument("scatter plot needs at least one point");
  double xmin = 0, xmax = 0, ymin = 0, ymax = 0, vmax = 0;
  for (const auto& p : points) {
    xmin = std::min(xmin, p.x);
    xmax = std::max(xmax, p.x);
    ymin = std::min(ymin, p.y);
    ymax = std::max(ymax, p.y);
    vmax = std::max(vmax, std::abs(p.value));
  }
  if (o.color_max > 0) vmax = o.color_max;
  // Equal axis ranges keep the iso-lines at 45 degrees.
  const double lo = std::min(xmin, ymin);
  double hi = std::max(xmax, ymax);
  if (hi - lo <= 0) hi = lo + 1;
  const double pad = 0.05 * (hi - lo);
  const double a = lo - pad, b = hi + pad;
  const double ml = 56, mr = 16, mt = 32, mb = 48;
  const double pw = o.width - ml - mr, ph = o.height - mt - mb;
  auto sx = [&](double x) { return ml + (x - a) / (b - a) * pw; };
  auto sy = [&](double y) { return mt + ph - (y - a) / (b - a) * ph; };

  std::ostringstream s;
  s << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
    << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << o.width
    << "\" height=\"" << o.height << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
    << "<rect x=\"0\" y=\"0\" width=\"" << o.width << "\" height=\"" << o.height
    << "\" fill=\"white\"/>\n";
  if (!o.title.empty())
    s << "<text x=\"" << o.width / 2 << "\" y=\"18\" text-anchor=\"middle\">" << xml_escape(o.title)
      << "</text>\n";
  s << "<clipPath id=\"plot\"><rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << pw
    << "\" height=\"" << ph << "\"/></clipPath>\n";
  s << "<g class=\"contours\" clip-path=\"url(#plot)\" stroke-dasharray=\"4 3\">\n";
  for (double c : o.contours)
    s << "<line class=\"contour\" stroke=\"" << hex_color(diverging_color(c, vmax))
      << "\" data-c=\"" << fmt(c) << "\" x1=\"" << fmt(sx(a)) << "\" y1=\""
      << fmt(sy(a + c)) << "\" x2=\"" << fmt(sx(b)) << "\" y2=\"" << fmt(sy(b + c)) << "\"/>\n";
  s << "</g>\n<g class=\"axes\" stroke=\"black\">\n"
    << "<line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw << "\" y2=\"" << mt + ph
    << "\"/>\n<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << mt + ph
    << "\"/>\n</g>\n<g class=\"ticks\">\n";
  for (double t : ticks(a, b)) {
    s << "<text x=\"" << fmt(sx(t)) << "\" y=\"" << mt + ph + 14 << "\" text-anchor=\"middle\">"
      << fmt(t) << "</text>\n";
    s << "<text x=\"" << ml - 4 << "\" y=\"" << fmt(sy(t) + 4) << "\" text-anchor=\"end\">" << fmt(t)
      << "</text>\n";
  }
  s << "</g>\n<text x=\"" << ml + pw / 2 << "\" y=\"" << o.height - 10
    << "\" text-anchor=\"middle\">" << xml_escape(o.x_label) << "</text>\n"
    << "<text x=\"14\" y=\"" << mt + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
    << mt + ph / 2 << ")\">" << xml_escape(o.y_label) << "</text>\n<g class=\"points\">\n";
  for (const auto& p : points)
    s << "<circle cx=\"" << fmt(sx(p.x)) << "\" cy=\"" << fmt(sy(p.y)) << "\" r=\"" << o.radius
      << "\" fill=\"" << hex_color(diverging_color(p.value, vmax))
      << "\" stroke=\"#444444\" stroke-width=\"0.3\"/>\n";
  s << "</g>\n</svg>\n";
  return s.str();
}

std::string svg_matrix(const std::vector<std::vector<double>>& values,
                       const std::vector<std::string>& row_labels,
                       const std::vector<std::string>& col_labels, const std::string& title) {
  const std::size_t rows = values.size(), cols = rows ? values[0].size() : 0;
  const double cell = 28, ml = 80, mt = 60;
  const double w = ml + cell * static_cast<double>(cols) + 16;
  const double h = mt + cell * static_cast<double>(rows) + 16;
  std::ostringstream s;
  s << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
    << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << w << "\" height=\""
    << h << "\" font-family=\"sans-serif\" font-size=\"10\">\n"
    << "<rect x=\"0\" y=\"0\" width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n"
    << "<text x=\"" << w / 2 << "\" y=\"16\" text-anchor=\"middle\">" << xml_escape(title)
    << "</text>\n";
  for (std::size_t c = 0; c < cols && c < col_labels.size(); ++c)
    s << "<text x=\"" << ml + cell * (static_cast<double>(c) + 0.5) << "\" y=\"" << mt - 6
      << "\" text-anchor=\"middle\">" << xml_escape(col_labels[c]) << "</text>\n";
  for (std::size_t r = 0; r < rows; ++r) {
    const double y = mt + cell * static_cast<double>(r);
    if (r < row_labels.size())
      s << "<text x=\"" << ml - 6 << "\" y=\"" << y + cell / 2 + 4 << "\" text-anchor=\"end\">"
        << xml_escape(row_labels[r]) << "</text>\n";
    for (std::size_t c = 0; c < cols; ++c)
      s << "<rect x=\"" << ml + cell * static_cast<double>(c) << "\" y=\"" << y << "\" width=\""
        << cell << "\" height=\"" << cell << "\" fill=\""
        << hex_color(diverging_color(values[r][c], 1.0)) << "\" stroke=\"#dddddd\"><title>"
        << fmt(values[r][c]) << "</title></rect>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace tense
