#include <stdio.h>
#include <string.h>
#include <unistd.h>

static const char pin[] = "7391";

int main(int argc, char **argv) {
    const char *guess = argc > 1 ? argv[1] : "";
    size_t i;

    if (strlen(guess) != sizeof pin - 1) {
        puts("denied");
        return 1;
    }
    /* Early exit plus per-digit work leaks the matching prefix length. */
    for (i = 0; i < sizeof pin - 1; i++) {
        if (guess[i] != pin[i]) {
            puts("denied");
            return 1;
        }
        usleep(20000);
    }
    char line[128];
    FILE *f = fopen("flag.txt", "r");
    if (!f || !fgets(line, sizeof line, f))
        return 2;
    fputs(line, stdout);
    return 0;
}
