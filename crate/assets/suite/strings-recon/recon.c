#include <stdio.h>
#include <string.h>

static const char banner[] = "recon fixture: give me the passphrase";
static const char secret[] = "flag{str1ngs_t3ll_t4l3s}";

int main(int argc, char **argv) {
    if (argc > 1 && strcmp(argv[1], secret) == 0) {
        puts("accepted");
        return 0;
    }
    puts(banner);
    return 1;
}
