#include "galign/binio.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace galign {

void write_file_atomic(const std::string& path, const std::string& bytes) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    check(f.good(), ErrorKind::Io, "cannot open " + tmp);
    f.write(bytes.data(), std::streamsize(bytes.size()));
    check(f.good(), ErrorKind::Io, "write failed for " + tmp);
  }
  check(std::rename(tmp.c_str(), path.c_str()) == 0, ErrorKind::Io, "rename failed for " + path);
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), ErrorKind::Io, "cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace galign
