#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace lukv::detail {

/// Raw f32 little-endian tensor files, byte-exact on any host endianness.
void write_f32le(const std::filesystem::path& path,
                 const std::vector<double>& data);
std::vector<double> read_f32le(const std::filesystem::path& path,
                               const std::string& tensor,
                               std::size_t expected_elems);

}  // namespace lukv::detail
