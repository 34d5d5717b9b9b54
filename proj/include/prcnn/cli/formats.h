#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "prcnn/branch.h"
#include "prcnn/metrics.h"

namespace prcnn::cli {

// Malformed input file or configuration; maps to exit code 2.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ILM1 label maps: "ILM1", u32 LE height, u32 LE width, then h*w u16 LE
// labels, row-major.
std::vector<std::uint8_t> encode_ilm1(const LabelMap& map);
LabelMap decode_ilm1(const std::vector<std::uint8_t>& bytes);
LabelMap read_ilm1(const std::filesystem::path& path);
void write_ilm1(const std::filesystem::path& path, const LabelMap& map);

struct AnnotatedImage {
  std::string id;
  int width = 0;
  int height = 0;
  std::vector<InstanceParsing> instances;
};

// Accepts either {"images": [{id, width, height, instances}, ...]} or the
// single-image form {"image": {width, height[, id]}, "instances": [...]}.
// Label-map paths resolve relative to `base_dir`. Boxes are clamped to the
// image; grids are cropped so their pixels keep their image positions.
std::vector<AnnotatedImage> parse_annotations(const nlohmann::json& doc,
                                              const std::filesystem::path& base_dir);
std::vector<AnnotatedImage> load_annotations(const std::filesystem::path& path);

// {"parts": P, "grid": G, "distances": [N*N numbers]}.
GeodesicTable load_geodesic_table(const std::filesystem::path& path);

// Parameter blob "PRB1": u32 LE tensor count, then per tensor a u32 name
// length, the name bytes, a u64 value count and that many f64 LE values.
void save_param_blob(const std::filesystem::path& path,
                     const std::vector<NamedParam>& params);
// Fills `params` in place; names and sizes must match exactly.
void load_param_blob(const std::filesystem::path& path,
                     const std::vector<NamedParam>& params);

nlohmann::json read_json_file(const std::filesystem::path& path);

}  // namespace prcnn::cli
