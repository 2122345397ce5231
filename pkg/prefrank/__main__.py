from prefrank.main import main

main()
