#include <stdio.h>
#include <stdlib.h>

struct frame {
    char buf[32];
    unsigned key;
    char pad[8];
};

static void win(void) {
    char line[128];
    FILE *f = fopen("flag.txt", "r");
    if (!f || !fgets(line, sizeof line, f)) {
        puts("flag file missing");
        exit(2);
    }
    fputs(line, stdout);
    fclose(f);
}

int main(void) {
    struct frame fr = {{0}, 0, {0}};
    char *p = fr.buf;
    int c;

    setvbuf(stdout, NULL, _IONBF, 0);
    puts("name?");
    /* Unbounded copy: the bug. */
    while ((c = getchar()) != EOF && c != '\n')
        *p++ = (char)c;
    if (fr.key == 0x4b434148u) {
        win();
        return 0;
    }
    printf("hello %.32s, key=0x%08x\n", fr.buf, fr.key);
    return 1;
}
