#include "dki/tensor.hpp"

namespace dki {
namespace detail {

OpCounters*& active_counters_slot() {
  thread_local OpCounters* c = nullptr;
  return c;
}

Zone& active_zone_slot() {
  thread_local Zone z = Zone::General;
  return z;
}

int& active_layer_slot() {
  thread_local int layer = -1;
  return layer;
}

bool& grad_enabled_slot() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail
}  // namespace dki
