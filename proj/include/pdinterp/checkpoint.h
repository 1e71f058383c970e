#ifndef PDINTERP_CHECKPOINT_H_
#define PDINTERP_CHECKPOINT_H_

// Checkpoint layout:
//   8-byte magic "PDICKPT\0"
//   uint32 format version (little-endian)
//   uint32 header length, followed by a JSON header describing every layer
//   little-endian float32 parameter blocks in layer order

#include <filesystem>
#include <string>
#include <utility>

#include "pdinterp/network.h"

namespace pdinterp {

inline constexpr char kCheckpointMagic[8] = {'P', 'D', 'I', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  NetworkSpec spec;
  NetworkParams<float> params;
};

void save_checkpoint(const NetworkSpec& spec, const NetworkParams<float>& params,
                     const std::filesystem::path& path);

// Throws FormatError on bad magic, unsupported version or truncation.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Serialized bytes of a checkpoint (the exact file contents).
std::string checkpoint_bytes(const NetworkSpec& spec, const NetworkParams<float>& params);
Checkpoint parse_checkpoint(const std::string& bytes);

}  // namespace pdinterp

#endif  // PDINTERP_CHECKPOINT_H_
