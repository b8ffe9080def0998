#ifndef XMPR_CHECKPOINT_HPP
#define XMPR_CHECKPOINT_HPP

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "xmpr/autodiff.hpp"

namespace xmpr {

/// Owns named parameters at stable addresses so graphs can hold raw pointers.
class ParamStore {
 public:
  ad::Parameter& create(const std::string& name, Tensor init);
  ad::Parameter& get(const std::string& name);
  const ad::Parameter& get(const std::string& name) const;
  bool has(const std::string& name) const { return index_.count(name) > 0; }

  /// Insertion order, which fixes the checkpoint layout.
  std::vector<ad::Parameter*> all();
  std::size_t size() const { return params_.size(); }
  Index total_scalars() const;
  void zero_grad();

 private:
  std::vector<std::unique_ptr<ad::Parameter>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Flat binary container: magic "XMPRCKPT", u32 version, u64 tensor count,
/// then per tensor: u32 name length, name bytes, u32 rank, u64 extents,
/// little-endian IEEE-754 doubles.
void save_checkpoint(const std::string& path, const std::vector<ad::Parameter*>& params);

std::map<std::string, Tensor> load_checkpoint(const std::string& path);

/// Load into an existing store; every stored tensor must exist with the same
/// shape, and every store entry must be present in the file.
void load_checkpoint_into(const std::string& path, ParamStore& store);

}  // namespace xmpr

#endif  // XMPR_CHECKPOINT_HPP
