#include "prcnn/cli/formats.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

namespace prcnn::cli {

namespace {

using nlohmann::json;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::string what)
      : bytes_(bytes), what_(std::move(what)) {}

  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError(what_ + ": truncated");
  }
  std::uint64_t uint(int width) {
    need(width);
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= std::uint64_t{bytes_[pos_ + i]} << (8 * i);
    pos_ += width;
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(bytes_.begin() + pos_, bytes_.begin() + pos_ + n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path,
                 const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

void reject_unknown_keys(const json& obj, std::initializer_list<const char*> keys,
                         const std::string& where) {
  const std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : obj.items()) {
    if (!allowed.contains(k)) throw FormatError(where + ": unknown key '" + k + "'");
  }
}

const json& require(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) {
    throw FormatError(where + ": missing '" + key + "'");
  }
  return obj.at(key);
}

double number(const json& v, const std::string& where) {
  if (!v.is_number()) throw FormatError(where + ": expected a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) throw FormatError(where + ": non-finite number");
  return d;
}

int integer(const json& v, const std::string& where) {
  if (!v.is_number_integer()) throw FormatError(where + ": expected an integer");
  return v.get<int>();
}

LabelMap inline_labelmap(const json& rows, const std::string& where) {
  if (!rows.is_array() || rows.empty()) {
    throw FormatError(where + ": inline label map must be a non-empty array of rows");
  }
  LabelMap map;
  map.height = static_cast<int>(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (!row.is_array() || row.empty()) {
      throw FormatError(where + ": label map row " + std::to_string(r) +
                        " is not a non-empty array");
    }
    if (r == 0) map.width = static_cast<int>(row.size());
    if (static_cast<int>(row.size()) != map.width) {
      throw FormatError(where + ": label map rows have different lengths");
    }
    for (const auto& v : row) map.labels.push_back(integer(v, where));
  }
  return map;
}

// Clips the box to the image and crops the label grid to the pixels that
// fall inside it. Cropping the top/left keeps every remaining cell at its
// image position once x1/y1 are clamped to zero.
void clamp_to_image(InstanceParsing& inst, int width, int height) {
  const int ox = static_cast<int>(std::floor(inst.box.x1));
  const int oy = static_cast<int>(std::floor(inst.box.y1));
  const int c0 = std::clamp(-ox, 0, inst.labels.width);
  const int r0 = std::clamp(-oy, 0, inst.labels.height);
  const int c1 = std::clamp(width - ox, c0, inst.labels.width);
  const int r1 = std::clamp(height - oy, r0, inst.labels.height);
  if (c0 > 0 || r0 > 0 || c1 < inst.labels.width || r1 < inst.labels.height) {
    LabelMap cropped;
    cropped.height = r1 - r0;
    cropped.width = c1 - c0;
    for (int r = r0; r < r1; ++r) {
      for (int c = c0; c < c1; ++c) cropped.labels.push_back(inst.labels.at(r, c));
    }
    inst.labels = std::move(cropped);
  }
  const double w = width;
  const double h = height;
  inst.box.x1 = std::clamp(inst.box.x1, 0.0, w);
  inst.box.x2 = std::clamp(inst.box.x2, 0.0, w);
  inst.box.y1 = std::clamp(inst.box.y1, 0.0, h);
  inst.box.y2 = std::clamp(inst.box.y2, 0.0, h);
}

InstanceParsing parse_instance(const json& j, const std::filesystem::path& base_dir,
                               int width, int height, const std::string& where) {
  if (!j.is_object()) throw FormatError(where + ": instance must be an object");
  reject_unknown_keys(j, {"score", "box", "labelmap", "points"}, where);
  InstanceParsing inst;
  inst.score = j.contains("score") ? number(j.at("score"), where + ".score") : 1.0;
  if (inst.score < 0.0 || inst.score > 1.0) {
    throw FormatError(where + ".score: outside [0, 1]");
  }
  const auto& box = require(j, "box", where);
  if (!box.is_array() || box.size() != 4) {
    throw FormatError(where + ".box: expected [x1, y1, x2, y2]");
  }
  inst.box = {number(box[0], where + ".box"), number(box[1], where + ".box"),
              number(box[2], where + ".box"), number(box[3], where + ".box"),
              inst.score};
  if (inst.box.x2 < inst.box.x1 || inst.box.y2 < inst.box.y1) {
    throw FormatError(where + ".box: x2 < x1 or y2 < y1");
  }
  if (j.contains("labelmap")) {
    const auto& lm = j.at("labelmap");
    if (lm.is_string()) {
      try {
        inst.labels = read_ilm1(base_dir / lm.get<std::string>());
      } catch (const FormatError& e) {
        throw FormatError(where + ".labelmap: " + e.what());
      }
    } else {
      inst.labels = inline_labelmap(lm, where + ".labelmap");
    }
  }
  if (j.contains("points")) {
    const auto& pts = j.at("points");
    if (!pts.is_array()) throw FormatError(where + ".points: expected an array");
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const std::string pw = where + ".points[" + std::to_string(i) + "]";
      reject_unknown_keys(pts[i], {"part", "u", "v", "x", "y"}, pw);
      DensePosePoint p;
      p.part_index = integer(require(pts[i], "part", pw), pw + ".part");
      p.u = number(require(pts[i], "u", pw), pw + ".u");
      p.v = number(require(pts[i], "v", pw), pw + ".v");
      p.x = integer(require(pts[i], "x", pw), pw + ".x");
      p.y = integer(require(pts[i], "y", pw), pw + ".y");
      if (p.u < 0.0 || p.u > 1.0 || p.v < 0.0 || p.v > 1.0) {
        throw FormatError(pw + ": u and v must lie in [0, 1]");
      }
      inst.points.push_back(p);
    }
  }
  clamp_to_image(inst, width, height);
  return inst;
}

AnnotatedImage parse_image(const json& j, const json& instances,
                           const std::filesystem::path& base_dir,
                           const std::string& default_id, const std::string& where) {
  AnnotatedImage img;
  img.id = default_id;
  if (j.contains("id")) {
    const auto& id = j.at("id");
    if (id.is_string()) {
      img.id = id.get<std::string>();
    } else if (id.is_number_integer()) {
      img.id = std::to_string(id.get<long long>());
    } else {
      throw FormatError(where + ".id: expected a string or integer");
    }
  }
  img.width = integer(require(j, "width", where), where + ".width");
  img.height = integer(require(j, "height", where), where + ".height");
  if (img.width < 1 || img.height < 1) {
    throw FormatError(where + ": width and height must be positive");
  }
  if (!instances.is_array()) throw FormatError(where + ".instances: expected an array");
  for (std::size_t i = 0; i < instances.size(); ++i) {
    img.instances.push_back(parse_instance(
        instances[i], base_dir, img.width, img.height,
        where + ".instances[" + std::to_string(i) + "]"));
  }
  return img;
}

}  // namespace

std::vector<std::uint8_t> encode_ilm1(const LabelMap& map) {
  if (map.height < 0 || map.width < 0 ||
      map.labels.size() != static_cast<std::size_t>(map.height) * map.width) {
    throw FormatError("ILM1: label payload does not match dimensions");
  }
  std::vector<std::uint8_t> out{'I', 'L', 'M', '1'};
  put_u32(out, static_cast<std::uint32_t>(map.height));
  put_u32(out, static_cast<std::uint32_t>(map.width));
  for (int v : map.labels) {
    if (v < 0 || v > 0xffff) throw FormatError("ILM1: label does not fit in u16");
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
  }
  return out;
}

LabelMap decode_ilm1(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes, "ILM1");
  if (r.bytes(4) != "ILM1") throw FormatError("ILM1: bad magic");
  LabelMap map;
  const std::uint64_t h = r.uint(4);
  const std::uint64_t w = r.uint(4);
  if (bytes.size() - 12 != 2 * h * w) {
    throw FormatError("ILM1: payload is " + std::to_string(bytes.size() - 12) +
                      " bytes, expected " + std::to_string(2 * h * w));
  }
  map.height = static_cast<int>(h);
  map.width = static_cast<int>(w);
  map.labels.reserve(h * w);
  for (std::uint64_t i = 0; i < h * w; ++i) map.labels.push_back(static_cast<int>(r.uint(2)));
  return map;
}

LabelMap read_ilm1(const std::filesystem::path& path) {
  return decode_ilm1(read_bytes(path));
}

void write_ilm1(const std::filesystem::path& path, const LabelMap& map) {
  write_bytes(path, encode_ilm1(map));
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::vector<AnnotatedImage> parse_annotations(const nlohmann::json& doc,
                                              const std::filesystem::path& base_dir) {
  if (!doc.is_object()) throw FormatError("annotations: top level must be an object");
  std::vector<AnnotatedImage> images;
  if (doc.contains("images")) {
    reject_unknown_keys(doc, {"images"}, "annotations");
    const auto& arr = doc.at("images");
    if (!arr.is_array()) throw FormatError("annotations.images: expected an array");
    std::set<std::string> seen;
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const std::string where = "images[" + std::to_string(i) + "]";
      if (!arr[i].is_object()) throw FormatError(where + ": expected an object");
      reject_unknown_keys(arr[i], {"id", "width", "height", "instances"}, where);
      images.push_back(parse_image(arr[i], require(arr[i], "instances", where),
                                   base_dir, std::to_string(i), where));
      if (!seen.insert(images.back().id).second) {
        throw FormatError(where + ": duplicate image id '" + images.back().id + "'");
      }
    }
  } else {
    reject_unknown_keys(doc, {"image", "instances"}, "annotations");
    const auto& image = require(doc, "image", "annotations");
    if (!image.is_object()) throw FormatError("annotations.image: expected an object");
    reject_unknown_keys(image, {"id", "width", "height"}, "annotations.image");
    images.push_back(parse_image(image, require(doc, "instances", "annotations"),
                                 base_dir, "0", "annotations"));
  }
  return images;
}

std::vector<AnnotatedImage> load_annotations(const std::filesystem::path& path) {
  return parse_annotations(read_json_file(path), path.parent_path());
}

GeodesicTable load_geodesic_table(const std::filesystem::path& path) {
  const json doc = read_json_file(path);
  reject_unknown_keys(doc, {"parts", "grid", "distances"}, "geodesic table");
  GeodesicTable t;
  t.parts = integer(require(doc, "parts", "geodesic table"), "geodesic table.parts");
  t.grid = integer(require(doc, "grid", "geodesic table"), "geodesic table.grid");
  const auto& d = require(doc, "distances", "geodesic table");
  if (!d.is_array()) throw FormatError("geodesic table.distances: expected an array");
  for (const auto& v : d) t.distances.push_back(number(v, "geodesic table.distances"));
  GPSConfig probe;
  probe.source = GPSConfig::Source::kLookupTable;
  probe.table = t;
  try {
    validate_gps_config(probe);
  } catch (const std::invalid_argument& e) {
    throw FormatError(e.what());
  }
  return t;
}

void save_param_blob(const std::filesystem::path& path,
                     const std::vector<NamedParam>& params) {
  std::vector<std::uint8_t> out{'P', 'R', 'B', '1'};
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out.insert(out.end(), p.name.begin(), p.name.end());
    put_u64(out, p.values.size());
    for (double v : p.values) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      put_u64(out, bits);
    }
  }
  write_bytes(path, out);
}

void load_param_blob(const std::filesystem::path& path,
                     const std::vector<NamedParam>& params) {
  const auto bytes = read_bytes(path);
  Reader r(bytes, "PRB1 " + path.string());
  if (r.bytes(4) != "PRB1") throw FormatError("PRB1: bad magic");
  const std::uint64_t count = r.uint(4);
  if (count != params.size()) {
    throw FormatError("PRB1: blob holds " + std::to_string(count) +
                      " tensors, expected " + std::to_string(params.size()));
  }
  for (const auto& p : params) {
    const std::string name = r.bytes(r.uint(4));
    if (name != p.name) {
      throw FormatError("PRB1: found tensor '" + name + "', expected '" + p.name + "'");
    }
    const std::uint64_t n = r.uint(8);
    if (n != p.values.size()) {
      throw FormatError("PRB1: tensor '" + name + "' has " + std::to_string(n) +
                        " values, expected " + std::to_string(p.values.size()));
    }
    for (auto& v : p.values) {
      const std::uint64_t bits = r.uint(8);
      std::memcpy(&v, &bits, sizeof v);
    }
  }
  if (!r.done()) throw FormatError("PRB1: trailing bytes");
}

}  // namespace prcnn::cli
