#pragma once

#include <functional>
#include <string>
#include <vector>

#include "facectl/archive.hpp"
#include "facectl/layers.hpp"

namespace facectl {

using StateVisit = std::function<void(StateVisitor&)>;

// Stores every parameter value and buffer reached by `visit` under its
// visiting name.
void save_state(Archive& archive, const StateVisit& visit);

// Reads the entries written by save_state back into place. Every entry is
// checked (presence and shape) before anything is modified; a failure throws
// ArchiveError naming the offending entry.
void load_state(const Archive& archive, const StateVisit& visit);

// In-memory copy of the same state, for rolling back a failed update.
class StateSnapshot {
 public:
  void capture(const StateVisit& visit);
  void restore(const StateVisit& visit) const;
  bool empty() const { return values_.empty(); }

 private:
  std::vector<Tensor> values_;
};

}  // namespace facectl
