#include <stdio.h>

static const char secret[] = "flag{x}";

int main(int argc, char **argv) {
    (void)argv;
    if (argc > 5) {
        puts(secret);
    }
    return 0;
}
