#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>

#include "sbfm/errors.hpp"

namespace sbfm {

// Writes to "<path>.tmp" and renames over `path`, so readers never see a
// partially written file.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw OutputError("cannot open " + tmp.string() + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw OutputError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw OutputError("cannot rename " + tmp.string() + ": " + ec.message());
}

}  // namespace sbfm
