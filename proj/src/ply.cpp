#include "dap/ply.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

namespace dap {
namespace {

static_assert(std::endian::native == std::endian::little, "binary PLY I/O assumes a little-endian host");

struct Property {
  std::string type;
  std::string name;
};

size_t type_size(const std::string& type) {
  if (type == "char" || type == "uchar" || type == "int8" || type == "uint8") return 1;
  if (type == "short" || type == "ushort" || type == "int16" || type == "uint16") return 2;
  if (type == "int" || type == "uint" || type == "float" || type == "int32" || type == "uint32" ||
      type == "float32") {
    return 4;
  }
  if (type == "double" || type == "float64") return 8;
  throw FormatError("ply: unsupported property type '" + type + "'");
}

double decode(const std::string& type, const char* p) {
  const auto load = [p]<typename T>(T) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return static_cast<double>(v);
  };
  if (type == "char" || type == "int8") return load(std::int8_t{});
  if (type == "uchar" || type == "uint8") return load(std::uint8_t{});
  if (type == "short" || type == "int16") return load(std::int16_t{});
  if (type == "ushort" || type == "uint16") return load(std::uint16_t{});
  if (type == "int" || type == "int32") return load(std::int32_t{});
  if (type == "uint" || type == "uint32") return load(std::uint32_t{});
  if (type == "float" || type == "float32") return load(float{});
  return load(double{});
}

}  // namespace

void write_ply(const std::filesystem::path& path, const PointCloud& pc, PlyFormat format) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  const bool with_scores = pc.scores.has_value();
  out << "ply\n"
      << (format == PlyFormat::ascii ? "format ascii 1.0\n" : "format binary_little_endian 1.0\n")
      << "element vertex " << pc.size() << "\n";
  for (const char* name : {"x", "y", "z", "nx", "ny", "nz"}) out << "property double " << name << "\n";
  if (with_scores) out << "property double score\n";
  out << "end_header\n";

  if (format == PlyFormat::ascii) {
    out << std::setprecision(17);
    for (Eigen::Index i = 0; i < pc.size(); ++i) {
      out << pc.positions(i, 0) << ' ' << pc.positions(i, 1) << ' ' << pc.positions(i, 2) << ' '
          << pc.normals(i, 0) << ' ' << pc.normals(i, 1) << ' ' << pc.normals(i, 2);
      if (with_scores) out << ' ' << (*pc.scores)(i);
      out << '\n';
    }
  } else {
    for (Eigen::Index i = 0; i < pc.size(); ++i) {
      double row[7] = {pc.positions(i, 0), pc.positions(i, 1), pc.positions(i, 2),
                       pc.normals(i, 0),   pc.normals(i, 1),   pc.normals(i, 2),
                       with_scores ? (*pc.scores)(i) : 0.0};
      out.write(reinterpret_cast<const char*>(row), static_cast<std::streamsize>((with_scores ? 7 : 6) * 8));
    }
  }
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

PointCloud read_ply(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");

  std::string line;
  if (!std::getline(in, line) || line.rfind("ply", 0) != 0) throw FormatError("ply: missing magic line");

  bool ascii = true;
  long long vertex_count = -1;
  bool in_vertex = false;
  bool vertex_seen = false;
  std::vector<Property> props;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "end_header") break;
    if (word == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt == "ascii") ascii = true;
      else if (fmt == "binary_little_endian") ascii = false;
      else throw FormatError("ply: unsupported format '" + fmt + "'");
    } else if (word == "element") {
      std::string name;
      long long count = 0;
      ls >> name >> count;
      in_vertex = name == "vertex";
      if (in_vertex) {
        vertex_count = count;
        vertex_seen = true;
      } else if (!vertex_seen) {
        throw FormatError("ply: elements before 'vertex' are not supported");
      }
    } else if (word == "property" && in_vertex) {
      Property p;
      ls >> p.type;
      if (p.type == "list") throw FormatError("ply: list properties on vertices are not supported");
      ls >> p.name;
      props.push_back(p);
    }
  }
  if (vertex_count < 0) throw FormatError("ply: no vertex element");

  const auto find = [&](const std::string& name) -> int {
    for (size_t i = 0; i < props.size(); ++i) {
      if (props[i].name == name) return static_cast<int>(i);
    }
    return -1;
  };
  const int ix = find("x"), iy = find("y"), iz = find("z");
  const int inx = find("nx"), iny = find("ny"), inz = find("nz");
  const int iscore = find("score");
  if (ix < 0 || iy < 0 || iz < 0) throw FormatError("ply: missing x/y/z properties");
  if (inx < 0 || iny < 0 || inz < 0) throw FormatError("ply: missing nx/ny/nz properties");

  PointCloud pc;
  pc.positions.resize(vertex_count, 3);
  pc.normals.resize(vertex_count, 3);
  if (iscore >= 0) pc.scores = Eigen::VectorXd(vertex_count);

  std::vector<double> values(props.size());
  std::vector<size_t> offsets(props.size());
  size_t stride = 0;
  for (size_t i = 0; i < props.size(); ++i) {
    offsets[i] = stride;
    stride += type_size(props[i].type);
  }
  std::vector<char> buf(stride);

  for (long long v = 0; v < vertex_count; ++v) {
    if (ascii) {
      if (!std::getline(in, line)) throw FormatError("ply: truncated vertex list");
      std::istringstream ls(line);
      for (auto& value : values) {
        if (!(ls >> value)) throw FormatError("ply: malformed vertex line " + std::to_string(v));
      }
    } else {
      if (!in.read(buf.data(), static_cast<std::streamsize>(stride))) throw FormatError("ply: truncated binary body");
      for (size_t i = 0; i < props.size(); ++i) values[i] = decode(props[i].type, buf.data() + offsets[i]);
    }
    pc.positions.row(v) << values[ix], values[iy], values[iz];
    pc.normals.row(v) << values[inx], values[iny], values[inz];
    if (iscore >= 0) (*pc.scores)(v) = values[iscore];
  }
  return pc;
}

}  // namespace dap
