// Command-line entry point. Subcommands are filled in as the toolkit grows.
#include <cstdio>

int main() {
  std::puts("refpose: no subcommands wired up yet");
  return 0;
}
