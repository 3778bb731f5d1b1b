from taabench.cli import main

main()
