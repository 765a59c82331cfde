// Acceptance suite: one pass/fail line per criterion. Placeholder until the
// library settles.
#include <cstdio>

int main() {
  std::puts("acceptance suite not yet wired");
  return 1;
}
